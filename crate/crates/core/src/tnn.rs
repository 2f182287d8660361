//! Tree neural network over (target graph, partial formula) pairs.
//!
//! Every symbol owns one dense `tanh` block whose input is the
//! concatenation of its children's embeddings; leaves (variables and holes)
//! are learned vectors. The root combines the graph embedding and the
//! formula embedding through the extra `concat` block, then feeds a softmax
//! policy head over the token vocabulary and a sigmoid value head.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt};

use crate::enumerate::Graph;
use crate::error::{Error, Result};
use crate::lang::{HoleKind, Token, MAX_DEPTH, VOCAB_SIZE};

/// Embedding width; equal to the number of graph points so that the graph
/// embedding and a formula embedding can share the `concat` block.
pub const EMBED_DIM: usize = 64;

/// L2 coefficient of the training loss.
pub const L2: f64 = 1e-4;

const NUM_VARS: usize = MAX_DEPTH as usize + 1;
const TERM_HOLE: usize = NUM_VARS;
const FORMULA_HOLE: usize = NUM_VARS + 1;
const NUM_LEAVES: usize = NUM_VARS + 2;
/// Blocks 0..15 follow token indices; block 15 is `concat`.
const CONCAT: usize = 15;
const NUM_BLOCKS: usize = 16;

fn block_arity(block: usize) -> usize {
    match block {
        12 | 13 => 1,
        _ => 2,
    }
}

/// Symbol names in checkpoint order: leaves, then blocks.
pub fn symbol_table() -> Vec<String> {
    let mut names: Vec<String> = (0..NUM_VARS).map(|k| Token::Var(k as u8).to_string()).collect();
    names.push("term_hole".into());
    names.push("formula_hole".into());
    names.extend((0..15).map(|i| Token::from_index(i).to_string()));
    names.push("concat".into());
    names
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Tensor {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tensors: Vec<Tensor>,
    total: usize,
}

impl Layout {
    fn new() -> Layout {
        let d = EMBED_DIM;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let t = Tensor { name, shape, offset };
            offset += t.len();
            tensors.push(t);
        };
        let names = symbol_table();
        for name in &names[..NUM_LEAVES] {
            add(format!("leaf.{name}"), vec![d]);
        }
        for (j, name) in names[NUM_LEAVES..].iter().enumerate() {
            add(format!("block.{name}.w"), vec![d, block_arity(j) * d]);
            add(format!("block.{name}.b"), vec![d]);
        }
        add("policy.w".into(), vec![VOCAB_SIZE, d]);
        add("policy.b".into(), vec![VOCAB_SIZE]);
        add("value.w".into(), vec![d]);
        add("value.b".into(), vec![1]);
        Layout { tensors, total: offset }
    }

    fn leaf(&self, i: usize) -> usize {
        self.tensors[i].offset
    }

    fn block_w(&self, j: usize) -> usize {
        self.tensors[NUM_LEAVES + 2 * j].offset
    }

    fn block_b(&self, j: usize) -> usize {
        self.tensors[NUM_LEAVES + 2 * j + 1].offset
    }

    fn head(&self, k: usize) -> usize {
        self.tensors[NUM_LEAVES + 2 * NUM_BLOCKS + k].offset
    }
}

/// All network weights, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TnnParams {
    data: Vec<f64>,
    layout: Layout,
}

impl TnnParams {
    pub fn zeros() -> TnnParams {
        let layout = Layout::new();
        TnnParams { data: vec![0.0; layout.total], layout }
    }

    /// Xavier-uniform weights, small random leaves, zero biases.
    pub fn random(rng: &mut impl Rng) -> TnnParams {
        let mut p = TnnParams::zeros();
        for t in p.layout.tensors.clone() {
            let slice = &mut p.data[t.offset..t.offset + t.len()];
            let limit = match t.shape.as_slice() {
                [_] if t.name.starts_with("leaf.") => 0.5,
                [out, inp] => (6.0 / (out + inp) as f64).sqrt(),
                [d] if t.name == "value.w" => (6.0 / (*d + 1) as f64).sqrt(),
                _ => 0.0,
            };
            if limit > 0.0 {
                for v in slice.iter_mut() {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// Range of the named tensor within [`TnnParams::as_slice`].
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.offset..t.offset + t.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TnnParams> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        TnnParams::from_bytes(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8 + 4096);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, EMBED_DIM as u32);
        put_u32(&mut out, VOCAB_SIZE as u32);
        let symbols = symbol_table();
        put_u32(&mut out, symbols.len() as u32);
        for s in &symbols {
            put_str(&mut out, s);
        }
        put_u32(&mut out, self.layout.tensors.len() as u32);
        for t in &self.layout.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for v in &self.data[t.offset..t.offset + t.len()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TnnParams> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let d = r.u32()? as usize;
        let v = r.u32()? as usize;
        if d != EMBED_DIM || v != VOCAB_SIZE {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has d={d}, V={v}; expected d={EMBED_DIM}, V={VOCAB_SIZE}"
            )));
        }
        let nsym = r.u32()? as usize;
        let symbols = (0..nsym).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        if symbols != symbol_table() {
            return Err(Error::ShapeMismatch("symbol table differs".into()));
        }
        let mut p = TnnParams::zeros();
        let ntensors = r.u32()? as usize;
        if ntensors != p.layout.tensors.len() {
            return Err(Error::ShapeMismatch(format!("{ntensors} tensors in checkpoint")));
        }
        for i in 0..ntensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
            let t = p.layout.tensors[i].clone();
            if name != t.name || shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} {shape:?}, expected {} {:?}",
                    t.name, t.shape
                )));
            }
            for k in 0..t.len() {
                let raw = r.take(8)?;
                p.data[t.offset + k] = f64::from_le_bytes(raw.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(p)
    }
}

const MAGIC: &[u8; 8] = b"HFSYNTNN";
const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}

/// ±1 per graph point, or all zeros when the graph is hidden.
pub fn embed_graph(g: Graph, hidden: bool) -> [f64; EMBED_DIM] {
    let mut v = [0.0; EMBED_DIM];
    if !hidden {
        for (n, x) in v.iter_mut().enumerate() {
            *x = if g.get(n as u32) { 1.0 } else { -1.0 };
        }
    }
    v
}

#[derive(Debug, Clone, Copy)]
enum Sym {
    Leaf(usize),
    Block(usize),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    sym: Sym,
    children: [usize; 2],
}

/// Builds the post-order node list of a (possibly partial) prefix; missing
/// arguments become hole leaves.
fn build_tree(tokens: &[Token]) -> Vec<Node> {
    fn go(tokens: &[Token], pos: &mut usize, kind: HoleKind, nodes: &mut Vec<Node>) -> usize {
        let Some(&t) = tokens.get(*pos) else {
            let leaf = if kind == HoleKind::Term { TERM_HOLE } else { FORMULA_HOLE };
            nodes.push(Node { sym: Sym::Leaf(leaf), children: [0; 2] });
            return nodes.len() - 1;
        };
        *pos += 1;
        let node = match t {
            Token::Var(k) => Node { sym: Sym::Leaf(k as usize), children: [0; 2] },
            _ => {
                let kinds = match t {
                    Token::Rel(_) | Token::Cup => [HoleKind::Term, HoleKind::Term],
                    Token::Imp | Token::And => [HoleKind::Formula, HoleKind::Formula],
                    Token::Quant(_) => [HoleKind::Term, HoleKind::Formula],
                    _ => [HoleKind::Term, HoleKind::Term],
                };
                let mut children = [0; 2];
                for (c, &k) in children.iter_mut().zip(&kinds).take(t.arity()) {
                    *c = go(tokens, pos, k, nodes);
                }
                Node { sym: Sym::Block(t.index()), children }
            }
        };
        nodes.push(node);
        nodes.len() - 1
    }
    let mut nodes = Vec::with_capacity(2 * tokens.len() + 2);
    let mut pos = 0;
    go(tokens, &mut pos, HoleKind::Formula, &mut nodes);
    nodes
}

/// Dot product with four independent accumulators, so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dense_tanh(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = (b[o] + dot(&w[o * n_in..(o + 1) * n_in], input)).tanh();
    }
}

/// Network output for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax over the whole vocabulary.
    pub policy: Vec<f64>,
    pub value: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn heads(p: &TnnParams, h: &[f64]) -> (Vec<f64>, f64) {
    let d = EMBED_DIM;
    let (pw, pb) = (p.layout.head(0), p.layout.head(1));
    let mut logits = vec![0.0; VOCAB_SIZE];
    for (i, l) in logits.iter_mut().enumerate() {
        let row = &p.data[pw + i * d..pw + (i + 1) * d];
        *l = p.data[pb + i] + dot(row, h);
    }
    let (vw, vb) = (p.layout.head(2), p.layout.head(3));
    let z = p.data[vb] + dot(&p.data[vw..vw + d], h);
    (logits, z)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Policy and value for `tokens` (a prefix, possibly incomplete) and target `g`.
pub fn forward(g: Graph, tokens: &[Token], p: &TnnParams, hidden: bool) -> Prediction {
    let tape = Tape::run(p, &build_tree(tokens), &embed_graph(g, hidden));
    let (logits, z) = heads(p, &tape.root);
    Prediction { policy: softmax(&logits), value: sigmoid(z) }
}

/// Forward activations kept for backpropagation.
struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    root_input: Vec<f64>,
    root: Vec<f64>,
}

impl Tape {
    fn run(p: &TnnParams, nodes: &[Node], graph: &[f64; EMBED_DIM]) -> Tape {
        let d = EMBED_DIM;
        let mut inputs = Vec::with_capacity(nodes.len());
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
        for node in nodes {
            match node.sym {
                Sym::Leaf(i) => {
                    let off = p.layout.leaf(i);
                    inputs.push(Vec::new());
                    outputs.push(p.data[off..off + d].to_vec());
                }
                Sym::Block(j) => {
                    let arity = block_arity(j);
                    let mut input = Vec::with_capacity(arity * d);
                    for &c in &node.children[..arity] {
                        input.extend_from_slice(&outputs[c]);
                    }
                    let mut out = vec![0.0; d];
                    let (w, b) = (p.layout.block_w(j), p.layout.block_b(j));
                    dense_tanh(&p.data[w..w + arity * d * d], &p.data[b..b + d], &input, &mut out);
                    inputs.push(input);
                    outputs.push(out);
                }
            }
        }
        let mut root_input = Vec::with_capacity(2 * d);
        root_input.extend_from_slice(graph);
        root_input.extend_from_slice(outputs.last().expect("nonempty tree"));
        let mut root = vec![0.0; d];
        let (w, b) = (p.layout.block_w(CONCAT), p.layout.block_b(CONCAT));
        dense_tanh(&p.data[w..w + 2 * d * d], &p.data[b..b + d], &root_input, &mut root);
        Tape { nodes: nodes.to_vec(), inputs, outputs, root_input, root }
    }
}

/// Adds `dpre ⊗ input` to the weight gradient and returns `Wᵀ dpre`.
fn block_backward(
    p: &TnnParams,
    grad: &mut [f64],
    block: usize,
    input: &[f64],
    output: &[f64],
    d_out: &[f64],
) -> Vec<f64> {
    let d = EMBED_DIM;
    let n_in = input.len();
    let (w, b) = (p.layout.block_w(block), p.layout.block_b(block));
    let mut d_in = vec![0.0; n_in];
    for o in 0..d {
        let dpre = d_out[o] * (1.0 - output[o] * output[o]);
        if dpre == 0.0 {
            continue;
        }
        grad[b + o] += dpre;
        let row = w + o * n_in;
        for i in 0..n_in {
            grad[row + i] += dpre * input[i];
            d_in[i] += dpre * p.data[row + i];
        }
    }
    d_in
}

/// One supervised example taken from search statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: Graph,
    /// The partial formula at the search root.
    pub tokens: Vec<Token>,
    /// Visit distribution over the vocabulary, zero off the legal tokens.
    pub policy: Vec<f64>,
    /// 1 if the attempt that produced the example solved its graph.
    pub value: f64,
}

/// Data term of one example, accumulating its gradient scaled by `scale`.
fn example_loss(p: &TnnParams, ex: &Example, hidden: bool, grad: Option<(&mut [f64], f64)>) -> f64 {
    let d = EMBED_DIM;
    let tape = Tape::run(p, &build_tree(&ex.tokens), &embed_graph(ex.graph, hidden));
    let (logits, z) = heads(p, &tape.root);
    // softmax restricted to the target's support
    let support: Vec<usize> = (0..VOCAB_SIZE).filter(|&i| ex.policy[i] > 0.0).collect();
    let m = support.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + support.iter().map(|&i| (logits[i] - m).exp()).sum::<f64>().ln();
    let ce: f64 = support.iter().map(|&i| -ex.policy[i] * (logits[i] - lse)).sum();
    let v = sigmoid(z);
    let loss = ce + (v - ex.value).powi(2);

    let Some((grad, scale)) = grad else {
        return loss;
    };
    let mut dh = vec![0.0; d];
    let (pw, pb) = (p.layout.head(0), p.layout.head(1));
    for &i in &support {
        let dl = scale * ((logits[i] - lse).exp() - ex.policy[i]);
        grad[pb + i] += dl;
        for k in 0..d {
            grad[pw + i * d + k] += dl * tape.root[k];
            dh[k] += dl * p.data[pw + i * d + k];
        }
    }
    let dz = scale * 2.0 * (v - ex.value) * v * (1.0 - v);
    let (vw, vb) = (p.layout.head(2), p.layout.head(3));
    grad[vb] += dz;
    for k in 0..d {
        grad[vw + k] += dz * tape.root[k];
        dh[k] += dz * p.data[vw + k];
    }
    let d_root_in = block_backward(p, grad, CONCAT, &tape.root_input, &tape.root, &dh);
    let mut d_out: Vec<Vec<f64>> = vec![Vec::new(); tape.nodes.len()];
    let top = tape.nodes.len() - 1;
    d_out[top] = d_root_in[d..].to_vec();
    for idx in (0..tape.nodes.len()).rev() {
        let dy = std::mem::take(&mut d_out[idx]);
        if dy.is_empty() {
            continue;
        }
        let node = tape.nodes[idx];
        match node.sym {
            Sym::Leaf(i) => {
                let off = p.layout.leaf(i);
                for k in 0..d {
                    grad[off + k] += dy[k];
                }
            }
            Sym::Block(j) => {
                let d_in = block_backward(p, grad, j, &tape.inputs[idx], &tape.outputs[idx], &dy);
                for (slot, &c) in node.children[..block_arity(j)].iter().enumerate() {
                    let part = &d_in[slot * d..(slot + 1) * d];
                    if d_out[c].is_empty() {
                        d_out[c] = part.to_vec();
                    } else {
                        for (a, b) in d_out[c].iter_mut().zip(part) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    loss
}

/// Mean data loss over the batch plus `L2·‖θ‖²`.
pub fn loss(batch: &[Example], p: &TnnParams, hidden: bool) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let data: f64 = batch.iter().map(|ex| example_loss(p, ex, hidden, None)).sum();
    data / batch.len() as f64 + L2 * p.squared_norm()
}

/// Gradient of [`loss`] with respect to every parameter.
pub fn backward(batch: &[Example], p: &TnnParams, hidden: bool) -> TnnParams {
    assert!(!batch.is_empty(), "empty batch");
    let mut grad = TnnParams::zeros();
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        example_loss(p, ex, hidden, Some((&mut grad.data, scale)));
    }
    for (g, w) in grad.data.iter_mut().zip(&p.data) {
        *g += 2.0 * L2 * w;
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Only the newest this-many examples are used.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            window: 200_000,
        }
    }
}

/// Adam state over a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains a copy of `params` on the newest examples (`examples` is ordered
/// newest first) and returns it.
pub fn train_phase(examples: &[Example], params: &TnnParams, cfg: &TrainConfig, rng: &mut impl Rng) -> TnnParams {
    let mut out = params.clone();
    let window = &examples[..examples.len().min(cfg.window)];
    if window.is_empty() {
        return out;
    }
    let mut adam = Adam::new(out.len());
    let mut order: Vec<usize> = (0..window.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| window[i].clone()));
            let grad = backward(&batch, &out, false);
            adam.step(&mut out.data, &grad.data, cfg);
        }
    }
    debug_assert!(out.is_finite());
    out
}

/// Caching evaluator used by the search: embeddings of complete subtrees
/// are memoised by their token sequence.
pub struct Predictor<'a> {
    params: &'a TnnParams,
    graph: [f64; EMBED_DIM],
    cache: HashMap<Box<[Token]>, Box<[f64]>>,
    cache_limit: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(params: &'a TnnParams, g: Graph, hidden: bool) -> Predictor<'a> {
        Predictor { params, graph: embed_graph(g, hidden), cache: HashMap::new(), cache_limit: 1 << 20 }
    }

    pub fn predict(&mut self, tokens: &[Token]) -> Prediction {
        if self.cache.len() > self.cache_limit {
            self.cache.clear();
        }
        let mut pos = 0;
        let (root_emb, _) = self.embed(tokens, &mut pos, HoleKind::Formula);
        let d = EMBED_DIM;
        let p = self.params;
        let mut input = Vec::with_capacity(2 * d);
        input.extend_from_slice(&self.graph);
        input.extend_from_slice(&root_emb);
        let mut root = vec![0.0; d];
        let (w, b) = (p.layout.block_w(CONCAT), p.layout.block_b(CONCAT));
        dense_tanh(&p.data[w..w + 2 * d * d], &p.data[b..b + d], &input, &mut root);
        let (logits, z) = heads(p, &root);
        Prediction { policy: softmax(&logits), value: sigmoid(z) }
    }

    /// Embeds the subtree starting at `pos`; returns it and whether it was complete.
    fn embed(&mut self, tokens: &[Token], pos: &mut usize, kind: HoleKind) -> (Vec<f64>, bool) {
        let d = EMBED_DIM;
        let p = self.params;
        let start = *pos;
        let Some(&t) = tokens.get(start) else {
            let leaf = if kind == HoleKind::Term { TERM_HOLE } else { FORMULA_HOLE };
            let off = p.layout.leaf(leaf);
            return (p.data[off..off + d].to_vec(), false);
        };
        *pos += 1;
        if let Token::Var(k) = t {
            let off = p.layout.leaf(k as usize);
            return (p.data[off..off + d].to_vec(), true);
        }
        let kinds = match t {
            Token::Imp | Token::And => [HoleKind::Formula, HoleKind::Formula],
            Token::Quant(_) => [HoleKind::Term, HoleKind::Formula],
            _ => [HoleKind::Term, HoleKind::Term],
        };
        let arity = t.arity();
        let mut input = Vec::with_capacity(arity * d);
        let mut complete = true;
        for &k in &kinds[..arity] {
            let child_start = *pos;
            // complete children are looked up before recursing into them
            let end = complete_end(tokens, child_start);
            if let Some(e) = end.and_then(|end| self.cache.get(&tokens[child_start..end]).map(|e| (e, end))) {
                input.extend_from_slice(e.0);
                *pos = e.1;
                continue;
            }
            let (e, c) = self.embed(tokens, pos, k);
            complete &= c;
            input.extend_from_slice(&e);
        }
        let j = t.index();
        let mut out = vec![0.0; d];
        let (w, b) = (p.layout.block_w(j), p.layout.block_b(j));
        dense_tanh(&p.data[w..w + arity * d * d], &p.data[b..b + d], &input, &mut out);
        if complete && *pos - start > 1 {
            self.cache.insert(tokens[start..*pos].into(), out.clone().into_boxed_slice());
        }
        (out, complete)
    }
}

/// End of the complete subtree starting at `start`, if it is complete.
fn complete_end(tokens: &[Token], start: usize) -> Option<usize> {
    let mut need = 1usize;
    let mut i = start;
    while need > 0 {
        let t = *tokens.get(i)?;
        need = need - 1 + t.arity();
        i += 1;
    }
    Some(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_tokens;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn example(g: u64, tokens: &str, target: &[(usize, f64)], value: f64) -> Example {
        let mut policy = vec![0.0; VOCAB_SIZE];
        for &(i, p) in target {
            policy[i] = p;
        }
        Example { graph: Graph(g), tokens: toks(tokens), policy, value }
    }

    #[test]
    fn graph_embedding() {
        assert_eq!(embed_graph(Graph::ALL_TRUE, false), [1.0; 64]);
        assert_eq!(embed_graph(Graph(0), false), [-1.0; 64]);
        assert_eq!(embed_graph(Graph(12345), true), [0.0; 64]);
    }

    #[test]
    fn outputs_are_normalised_and_deterministic() {
        let p = TnnParams::random(&mut rng(1));
        let mut r = rng(2);
        for _ in 0..100 {
            let g = Graph(r.random());
            let n = r.random_range(0..6);
            let mut state = crate::lang::PartialFormula::new();
            for _ in 0..n {
                let legal = state.legal_next_tokens(12 - state.len());
                if legal.is_empty() {
                    break;
                }
                state.push(legal[r.random_range(0..legal.len())]).unwrap();
            }
            let out = forward(g, state.tokens(), &p, false);
            assert!((out.policy.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(out.value > 0.0 && out.value < 1.0);
            let again = forward(g, state.tokens(), &p, false);
            assert_eq!(out, again);
            let cached = Predictor::new(&p, g, false).predict(state.tokens());
            assert!(cached.policy.iter().zip(&out.policy).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn predictor_cache_agrees_with_forward() {
        let p = TnnParams::random(&mut rng(5));
        let mut pred = Predictor::new(&p, Graph(77), false);
        for s in ["", "imp", "imp in x x", "imp in x x and", "imp in x x and exe pow x", "imp in x x and exe pow x sub v1 x"] {
            let a = pred.predict(&toks(s));
            let b = forward(Graph(77), &toks(s), &p, false);
            assert!((a.value - b.value).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn hidden_graph_ignores_target() {
        let p = TnnParams::random(&mut rng(3));
        let t = toks("exe x neq");
        let a = forward(Graph(0), &t, &p, true);
        let b = forward(Graph(u64::MAX), &t, &p, true);
        assert_eq!(a, b);
        assert_ne!(forward(Graph(0), &t, &p, false), forward(Graph(u64::MAX), &t, &p, false));
    }

    #[test]
    fn loss_is_l2_at_perfect_fit() {
        let mut p = TnnParams::random(&mut rng(4));
        // zero heads make the policy uniform and the value 1/2
        for name in ["policy.w", "policy.b", "value.w", "value.b"] {
            let r = p.tensor_range(name).unwrap();
            p.as_mut_slice()[r].iter_mut().for_each(|v| *v = 0.0);
        }
        let ex = example(5, "in", &[(15, 1.0)], 0.5);
        let l = loss(&[ex], &p, false);
        assert!((l - L2 * p.squared_norm()).abs() < 1e-12);
    }

    #[test]
    fn identical_examples_double_gradient() {
        let p = TnnParams::random(&mut rng(6));
        let ex = example(9, "exe x", &[(0, 0.25), (4, 0.75)], 1.0);
        let single = backward(std::slice::from_ref(&ex), &p, false);
        let double = backward(&[ex.clone(), ex], &p, false);
        // the mean over two equal examples equals one example
        for (a, b) in single.as_slice().iter().zip(double.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_leaves_only_see_weight_decay() {
        let p = TnnParams::random(&mut rng(7));
        let ex = example(9, "in x", &[(15, 1.0)], 0.0);
        let g = backward(&[ex], &p, false);
        let r = p.tensor_range("leaf.v3").unwrap();
        for i in r {
            assert_eq!(g.as_slice()[i], 2.0 * L2 * p.as_slice()[i]);
        }
    }

    #[test]
    fn overfits_small_batch() {
        let p = TnnParams::random(&mut rng(8));
        let batch: Vec<Example> = (0..10)
            .map(|i| {
                let prefixes = ["", "in", "exe x", "imp", "and in x x", "fas pow", "sub x", "neq sing", "exs x eq", "in x"];
                let tokens = toks(prefixes[i]);
                let legal = crate::lang::PartialFormula::from_tokens(&tokens).unwrap().legal_next_tokens(10);
                let mut policy = vec![0.0; VOCAB_SIZE];
                policy[legal[i % legal.len()].index()] = 1.0;
                Example { graph: Graph(i as u64 * 7919), tokens, policy, value: (i % 2) as f64 }
            })
            .collect();
        let start = loss(&batch, &p, false);
        let cfg = TrainConfig { epochs: 200, batch_size: 10, learning_rate: 1e-2, ..TrainConfig::default() };
        let trained = train_phase(&batch, &p, &cfg, &mut rng(9));
        let end = loss(&batch, &trained, false);
        assert!(end < 0.1 * start, "{start} -> {end}");
        assert!(trained.is_finite());
    }

    #[test]
    fn train_phase_determinism_and_empty_buffer() {
        let p = TnnParams::random(&mut rng(10));
        let cfg = TrainConfig::default();
        assert_eq!(train_phase(&[], &p, &cfg, &mut rng(1)), p);
        let batch = vec![example(1, "in", &[(15, 1.0)], 1.0), example(2, "", &[(2, 0.5), (3, 0.5)], 0.0)];
        let a = train_phase(&batch, &p, &cfg, &mut rng(11));
        let b = train_phase(&batch, &p, &cfg, &mut rng(11));
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = TnnParams::random(&mut rng(12));
        let bytes = p.to_bytes();
        assert_eq!(TnnParams::from_bytes(&bytes).unwrap(), p);
        assert!(matches!(TnnParams::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut other_vocab = bytes.clone();
        other_vocab[16..20].copy_from_slice(&23u32.to_le_bytes());
        assert!(matches!(TnnParams::from_bytes(&other_vocab), Err(Error::ShapeMismatch(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        p.save(&path).unwrap();
        assert_eq!(TnnParams::load(&path).unwrap(), p);
    }
}
