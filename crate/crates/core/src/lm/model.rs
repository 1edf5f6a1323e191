//! Decoder-only pre-norm transformer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var, LN_EPS};
use super::tensor::{dot, gelu, softmax_in_place, Mat};
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fairlm-lm/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab_size: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
}

fn default_ff_mult() -> usize {
    4
}

impl LmConfig {
    /// Desk-scale defaults: 2 layers, width 64, 2 heads, context 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self { layers: 2, width: 64, heads: 2, context: 64, vocab_size, ff_mult: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layers < 2 {
            return bad("need at least 2 layers");
        }
        if self.width == 0 || self.heads == 0 || self.context == 0 || self.vocab_size < 3 || self.ff_mult == 0 {
            return bad("all sizes must be positive (vocab at least 3)");
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad("heads must divide width");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ff_width(&self) -> usize {
        self.width * self.ff_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub ff_in: Mat,
    pub ff_in_bias: Mat,
    pub ff_out: Mat,
    pub ff_out_bias: Mat,
}

const BLOCK_TENSORS: usize = 13;

impl Block {
    fn init(cfg: &LmConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.width, cfg.ff_width());
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        // residual branches start small so the untrained stack stays near identity
        let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        Self {
            ln1_gain: Mat::filled(1, d, 1.0),
            ln1_bias: Mat::zeros(1, d),
            wq: Mat::randn(d, d, std_d, rng),
            wk: Mat::randn(d, d, std_d, rng),
            wv: Mat::randn(d, d, std_d, rng),
            wo: Mat::randn(d, d, std_d * out_scale, rng),
            bo: Mat::zeros(1, d),
            ln2_gain: Mat::filled(1, d, 1.0),
            ln2_bias: Mat::zeros(1, d),
            ff_in: Mat::randn(d, f, std_d, rng),
            ff_in_bias: Mat::zeros(1, f),
            ff_out: Mat::randn(f, d, std_f * out_scale, rng),
            ff_out_bias: Mat::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Mat; BLOCK_TENSORS] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; BLOCK_TENSORS] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
        ]
    }

    const NAMES: [&'static str; BLOCK_TENSORS] = [
        "ln1.gain",
        "ln1.bias",
        "attn.wq",
        "attn.wk",
        "attn.wv",
        "attn.wo",
        "attn.bo",
        "ln2.gain",
        "ln2.bias",
        "ff.in",
        "ff.in_bias",
        "ff.out",
        "ff.out_bias",
    ];
}

/// Transformer parameters plus the vocabulary they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct LmModel {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<Block>,
    pub lnf_gain: Mat,
    pub lnf_bias: Mat,
    pub out_weight: Mat,
    pub out_bias: Mat,
}

/// Per-layer hidden features `h(1)..h(L)` for every prefix position; each
/// layer is a `positions x width` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    pub layers: Vec<Mat>,
}

impl HiddenStack {
    pub fn positions(&self) -> usize {
        self.layers[0].rows()
    }

    /// Elementwise mean of the last two layers at `position`.
    pub fn h_bar(&self, position: usize) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::InvalidConfig("h_bar needs at least two layers".into()));
        }
        if position >= self.positions() {
            return Err(Error::PositionOutOfRange { position, len: self.positions() });
        }
        let (a, b) = (self.layers[n - 2].row(position), self.layers[n - 1].row(position));
        Ok(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
    }
}

/// Tape handles for the model's parameters, in [`LmModel::tensors`] order.
pub struct ParamVars(pub Vec<Var>);

/// Graph outputs of a forward pass on the tape.
pub struct GraphOut {
    /// Residual stream after each block, `T x d`.
    pub hidden: Vec<Var>,
    /// `T x V` next-token logits.
    pub logits: Var,
}

impl GraphOut {
    /// `h_bar` at `position` as a `1 x d` node.
    pub fn h_bar(&self, tape: &mut Tape, position: usize) -> Var {
        let n = self.hidden.len();
        let a = tape.row(self.hidden[n - 2], position);
        let b = tape.row(self.hidden[n - 1], position);
        let s = tape.add(a, b);
        tape.scale(s, 0.5)
    }
}

impl LmModel {
    pub fn new(config: LmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::InvalidConfig(format!(
                "config vocab size {} does not match vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let tok_emb = Mat::randn(config.vocab_size, d, 0.1, &mut rng);
        let pos_emb = Mat::randn(config.context, d, 0.1, &mut rng);
        let blocks = (0..config.layers).map(|_| Block::init(&config, &mut rng)).collect();
        let out_weight = Mat::randn(d, config.vocab_size, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            vocab,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Mat::filled(1, d, 1.0),
            lnf_bias: Mat::zeros(1, d),
            out_weight,
            out_bias: Mat::zeros(1, config.vocab_size),
        })
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.out_weight, &self.out_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.out_weight, &mut self.out_bias]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            out.extend(Block::NAMES.iter().map(|n| format!("blocks.{l}.{n}")));
        }
        out.extend(["ln_f.gain", "ln_f.bias", "out.weight", "out.bias"].map(String::from));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors().into_iter().map(|m| tape.leaf(m.clone())).collect())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptyPrefix);
        }
        if len > self.config.context {
            return Err(Error::PrefixTooLong { len, max: self.config.context });
        }
        Ok(())
    }

    /// Differentiable forward pass of `ids` on `tape`.
    pub fn graph(&self, tape: &mut Tape, p: &ParamVars, ids: &[usize]) -> Result<GraphOut> {
        self.check_len(ids.len())?;
        let cfg = &self.config;
        let (hd, scale) = (cfg.head_dim(), 1.0 / (cfg.head_dim() as f64).sqrt());
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather(p.0[0], ids);
        let pos = tape.gather(p.0[1], &positions);
        let mut x = tape.add(tok, pos);
        let mut hidden = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let b = &p.0[2 + l * BLOCK_TENSORS..2 + (l + 1) * BLOCK_TENSORS];
            let a = tape.layer_norm(x, b[0], b[1]);
            let q = tape.matmul(a, b[2]);
            let k = tape.matmul(a, b[3]);
            let v = tape.matmul(a, b[4]);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * hd, hd);
                let kh = tape.slice_cols(k, h * hd, hd);
                let vh = tape.slice_cols(v, h * hd, hd);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, scale);
                let att = tape.causal_softmax(s);
                heads.push(tape.matmul(att, vh));
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(cat, b[5]);
            let o = tape.add_row(o, b[6]);
            x = tape.add(x, o);
            let m = tape.layer_norm(x, b[7], b[8]);
            let m = tape.matmul(m, b[9]);
            let m = tape.add_row(m, b[10]);
            let m = tape.gelu(m);
            let m = tape.matmul(m, b[11]);
            let m = tape.add_row(m, b[12]);
            x = tape.add(x, m);
            hidden.push(x);
        }
        let base = 2 + cfg.layers * BLOCK_TENSORS;
        let f = tape.layer_norm(x, p.0[base], p.0[base + 1]);
        let logits = tape.matmul(f, p.0[base + 2]);
        let logits = tape.add_row(logits, p.0[base + 3]);
        Ok(GraphOut { hidden, logits })
    }

    /// Incremental decoder over this model.
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            model: self,
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
        }
    }

    /// Hidden states and next-token log-probabilities at every prefix position.
    pub fn forward(&self, prefix: &[usize]) -> Result<(HiddenStack, Vec<Vec<f64>>)> {
        self.check_len(prefix.len())?;
        let mut dec = self.decoder();
        let (t, d) = (prefix.len(), self.config.width);
        let mut layers = vec![Mat::zeros(t, d); self.config.layers];
        let mut log_probs = Vec::with_capacity(t);
        for (pos, &id) in prefix.iter().enumerate() {
            let step = dec.step(id)?;
            for (l, h) in step.hidden.iter().enumerate() {
                layers[l].row_mut(pos).copy_from_slice(h);
            }
            log_probs.push(super::tensor::log_softmax(&step.logits));
        }
        Ok((HiddenStack { layers }, log_probs))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&Checkpoint::from(self)).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        ckpt.into_model()
    }
}

/// One decoding step's outputs.
pub struct StepOutput {
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Key/value-cached incremental forward pass; feeding a prefix token by token
/// gives the same numbers as the full causal pass.
#[derive(Clone)]
pub struct Decoder<'m> {
    model: &'m LmModel,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &a) in x.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(w.row(i)) {
            *o += a * b;
        }
    }
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn layer_norm(x: &[f64], gain: &Mat, bias: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) * is * gain.get(0, c) + bias.get(0, c))
        .collect()
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.keys[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&mut self, id: usize) -> Result<StepOutput> {
        let m = self.model;
        let cfg = &m.config;
        let pos = self.len();
        if pos >= cfg.context {
            return Err(Error::PrefixTooLong { len: pos + 1, max: cfg.context });
        }
        let (hd, scale) = (cfg.head_dim(), 1.0 / (cfg.head_dim() as f64).sqrt());
        let mut x: Vec<f64> = m.tok_emb.row(id).to_vec();
        add_into(&mut x, m.pos_emb.row(pos));
        let mut hidden = Vec::with_capacity(cfg.layers);
        for (l, b) in m.blocks.iter().enumerate() {
            let a = layer_norm(&x, &b.ln1_gain, &b.ln1_bias);
            let q = vec_mat(&a, &b.wq);
            self.keys[l].push(vec_mat(&a, &b.wk));
            self.values[l].push(vec_mat(&a, &b.wv));
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut cat = vec![0.0; cfg.width];
            let mut att = vec![0.0; keys.len()];
            for h in 0..cfg.heads {
                let r = h * hd..(h + 1) * hd;
                for (s, k) in att.iter_mut().zip(keys) {
                    *s = dot(&q[r.clone()], &k[r.clone()]) * scale;
                }
                softmax_in_place(&mut att);
                for (w, v) in att.iter().zip(values) {
                    for (o, vv) in cat[r.clone()].iter_mut().zip(&v[r.clone()]) {
                        *o += w * vv;
                    }
                }
            }
            let mut o = vec_mat(&cat, &b.wo);
            add_into(&mut o, b.bo.row(0));
            add_into(&mut x, &o);
            let n2 = layer_norm(&x, &b.ln2_gain, &b.ln2_bias);
            let mut f = vec_mat(&n2, &b.ff_in);
            add_into(&mut f, b.ff_in_bias.row(0));
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let mut f = vec_mat(&f, &b.ff_out);
            add_into(&mut f, b.ff_out_bias.row(0));
            add_into(&mut x, &f);
            hidden.push(x.clone());
        }
        let fin = layer_norm(&x, &m.lnf_gain, &m.lnf_bias);
        let mut logits = vec_mat(&fin, &m.out_weight);
        add_into(&mut logits, m.out_bias.row(0));
        Ok(StepOutput { hidden, logits })
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: LmConfig,
    vocab: Vocab,
    tensors: Vec<NamedTensor>,
}

impl From<&LmModel> for Checkpoint {
    fn from(m: &LmModel) -> Self {
        let tensors = m
            .tensor_names()
            .into_iter()
            .zip(m.tensors())
            .map(|(name, t)| NamedTensor { name, rows: t.rows(), cols: t.cols(), data: t.data().to_vec() })
            .collect();
        Self { format: CHECKPOINT_FORMAT.to_string(), config: m.config, vocab: m.vocab.clone(), tensors }
    }
}

impl Checkpoint {
    fn into_model(self) -> Result<LmModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointVersion { found: self.format, expected: CHECKPOINT_FORMAT.into() });
        }
        let mut model = LmModel::new(self.config, self.vocab, 0)?;
        let names = model.tensor_names();
        if names.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), t) in model.tensors_mut().into_iter().zip(&names).zip(self.tensors) {
            if &t.name != name || (t.rows, t.cols) != slot.shape() || t.data.len() != t.rows * t.cols {
                return Err(Error::ShapeMismatch(format!("tensor `{}` does not match `{name}` {:?}", t.name, slot.shape())));
            }
            *slot = Mat::from_vec(t.rows, t.cols, t.data);
        }
        if !model.is_finite() {
            return Err(Error::ShapeMismatch("checkpoint contains non-finite parameters".into()));
        }
        Ok(model)
    }
}
