//! Local GNN encoders (GCN, GraphSAGE-mean, GAT) and the server-side
//! classifier head, expressed through [`diffcore`](crate::diffcore) so that
//! gradients — and gradients of gradients — are available.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Node, SeedStream, SparseMatrix, Tape, Tensor};
use crate::graphdata::{AdjacencyScheme, NormalizedAdjacency};

/// Local encoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gcn,
    Sage,
    Gat,
}

impl Arch {
    /// Adjacency normalization the architecture expects.
    pub fn scheme(self) -> AdjacencyScheme {
        match self {
            Arch::Gcn => AdjacencyScheme::GcnSym,
            Arch::Sage | Arch::Gat => AdjacencyScheme::RowMean,
        }
    }
}

/// Hyperparameters of a local encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
}

impl GnnConfig {
    /// Standard settings: 2 layers of width 32 for GCN/GraphSAGE, 3 layers
    /// with 3 heads for GAT.
    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Gcn | Arch::Sage => Self {
                arch,
                n_layers: 2,
                hidden_dim: 32,
                n_heads: 1,
            },
            Arch::Gat => Self {
                arch,
                n_layers: 3,
                hidden_dim: 32,
                n_heads: 3,
            },
        }
    }
}

/// Glorot-uniform sample with explicit fan sizes (storage orientation may
/// differ from the semantic fan direction).
pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut SeedStream) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(rows, cols, data).expect("glorot shape")
}

/// One attention head: an input transform and the 2h'-dimensional scoring
/// vector applied to concatenated endpoint embeddings.
#[derive(Debug, Clone)]
pub struct GatHead {
    pub w: Tensor,
    pub a: Tensor,
}

#[derive(Debug, Clone)]
pub enum LocalLayer {
    /// GCN (`z·W`, stored in×out) or GraphSAGE (`z·Wᵀ`, stored out×in).
    Conv { w: Tensor },
    Gat { heads: Vec<GatHead> },
}

/// Client-side encoder; parameters are plain tensors registered on a tape
/// per forward pass. Parameter declaration order (layer by layer, and for
/// GAT `w` then `a` per head) fixes the gradient flattening order.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub config: GnnConfig,
    pub layers: Vec<LocalLayer>,
}

impl LocalModel {
    pub fn init(config: GnnConfig, in_dim: usize, rng: &mut SeedStream) -> Self {
        let h = config.hidden_dim;
        let mut layers = Vec::with_capacity(config.n_layers);
        for k in 0..config.n_layers {
            let fan_in = if k == 0 { in_dim } else { h };
            let layer = match config.arch {
                Arch::Gcn => LocalLayer::Conv {
                    w: glorot(fan_in, h, fan_in, h, rng),
                },
                Arch::Sage => LocalLayer::Conv {
                    w: glorot(h, fan_in, fan_in, h, rng),
                },
                Arch::Gat => {
                    let heads = (0..config.n_heads)
                        .map(|_| GatHead {
                            w: glorot(fan_in, h, fan_in, h, rng),
                            a: glorot(2 * h, 1, 2 * h, 1, rng),
                        })
                        .collect();
                    LocalLayer::Gat { heads }
                }
            };
            layers.push(layer);
        }
        Self { config, layers }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LocalLayer::Conv { w } => out.push(w),
                LocalLayer::Gat { heads } => {
                    for head in heads {
                        out.push(&head.w);
                        out.push(&head.a);
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LocalLayer::Conv { w } => out.push(w),
                LocalLayer::Gat { heads } => {
                    for head in heads {
                        out.push(&mut head.w);
                        out.push(&mut head.a);
                    }
                }
            }
        }
        out
    }

    /// Total number of parameter entries (the flattened gradient length).
    pub fn flat_len(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Per-client feature slice. Binary/mostly-zero slices are kept sparse so
/// the first-layer product stays proportional to the nonzero count.
#[derive(Debug, Clone)]
pub enum FeatureInput {
    Dense(Tensor),
    Sparse(Rc<SparseMatrix>),
}

impl FeatureInput {
    /// Extracts the given columns from a feature matrix, choosing the sparse
    /// representation when at most a quarter of entries are nonzero.
    pub fn from_columns(features: &Tensor, cols: &[usize]) -> Result<Self, DiffError> {
        let n = features.rows();
        let mut nnz = 0usize;
        let mut triplets = Vec::new();
        for r in 0..n {
            let row = features.row(r);
            for (j, &c) in cols.iter().enumerate() {
                let v = row[c];
                if v != 0.0 {
                    nnz += 1;
                    triplets.push((r, j, v));
                }
            }
        }
        let total = n * cols.len();
        if total > 0 && (nnz as f64) / (total as f64) <= 0.25 {
            Ok(FeatureInput::Sparse(Rc::new(SparseMatrix::from_triplets(
                n,
                cols.len(),
                &triplets,
            )?)))
        } else {
            let mut dense = Tensor::zeros(n, cols.len());
            for (r, j, v) in triplets {
                dense.set(r, j, v);
            }
            Ok(FeatureInput::Dense(dense))
        }
    }

    pub fn n_rows(&self) -> usize {
        match self {
            FeatureInput::Dense(t) => t.rows(),
            FeatureInput::Sparse(s) => s.n_rows(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureInput::Dense(t) => t.cols(),
            FeatureInput::Sparse(s) => s.n_cols(),
        }
    }

    /// `X·W` as a recorded operation (differentiable in `W`).
    fn matmul_right(&self, tape: &Tape, w: &Node) -> Result<Node, DiffError> {
        match self {
            FeatureInput::Dense(t) => tape.constant(t.clone()).matmul(w),
            FeatureInput::Sparse(s) => tape.spmm(s, w),
        }
    }
}

/// One GCN layer: `adj·(z·W)`, ReLU on hidden layers. `z` is either the raw
/// feature input (first layer) or the previous layer's node.
fn conv_layer(
    tape: &Tape,
    input: LayerInput<'_>,
    adj: &Rc<SparseMatrix>,
    w: &Node,
    transpose_w: bool,
    last: bool,
) -> Result<Node, DiffError> {
    let w_eff = if transpose_w { w.transpose() } else { w.clone() };
    let pre = match input {
        LayerInput::Features(f) => f.matmul_right(tape, &w_eff)?,
        LayerInput::Hidden(h) => h.matmul(&w_eff)?,
    };
    let agg = tape.spmm(adj, &pre)?;
    Ok(if last { agg } else { agg.relu() })
}

enum LayerInput<'a> {
    Features(&'a FeatureInput),
    Hidden(&'a Node),
}

/// One attention head over the directed closed-neighborhood pairs.
/// Returns the head output and the attention weights (one per pair).
fn gat_head_forward(
    tape: &Tape,
    input: &LayerInput<'_>,
    w: &Node,
    a: &Node,
    src: &Rc<Vec<usize>>,
    dst: &Rc<Vec<usize>>,
    n_nodes: usize,
) -> Result<(Node, Node), DiffError> {
    let wz = match input {
        LayerInput::Features(f) => f.matmul_right(tape, w)?,
        LayerInput::Hidden(h) => h.matmul(w)?,
    };
    let wz_dst = wz.gather_rows(dst)?;
    let wz_src = wz.gather_rows(src)?;
    let scores = tape
        .concat_cols(&[&wz_dst, &wz_src])?
        .matmul(a)?
        .leaky_relu(0.2);

    // Per-destination softmax, stabilized with a constant segment max.
    let score_vals = scores.value();
    let mut seg_max = vec![f64::NEG_INFINITY; n_nodes];
    for (e, &v) in dst.iter().enumerate() {
        seg_max[v] = seg_max[v].max(score_vals.get(e, 0));
    }
    let seg_max: Vec<f64> = seg_max
        .into_iter()
        .map(|m| if m.is_finite() { m } else { 0.0 })
        .collect();
    let max_node = tape.constant(Tensor::new(n_nodes, 1, seg_max)?);
    let shifted = scores.sub(&max_node.gather_rows(dst)?)?;
    let exp = shifted.exp();
    let denom = exp.scatter_add_rows(dst, n_nodes)?;
    let alpha = exp.div(&denom.gather_rows(dst)?)?;

    let weighted = wz_src.mul(&alpha.broadcast_cols(wz_src.cols())?)?;
    let out = weighted.scatter_add_rows(dst, n_nodes)?;
    Ok((out, alpha))
}

/// Stacks the configured layers over a client's feature slice and adjacency,
/// producing per-node embeddings (final layer emits pre-activation values).
pub fn local_forward(
    tape: &Tape,
    model_params: &[Node],
    config: &GnnConfig,
    features: &FeatureInput,
    adj: &NormalizedAdjacency,
) -> Result<Node, DiffError> {
    let n_nodes = features.n_rows();
    let adj_matrix = Rc::new(adj.matrix.clone());
    let (src, dst): (Vec<usize>, Vec<usize>) = adj.directed_pairs.iter().copied().unzip();
    let (src, dst) = (Rc::new(src), Rc::new(dst));

    let mut hidden: Option<Node> = None;
    let mut p = 0usize;
    for k in 0..config.n_layers {
        let last = k + 1 == config.n_layers;
        let input = match &hidden {
            None => LayerInput::Features(features),
            Some(h) => LayerInput::Hidden(h),
        };
        let out = match config.arch {
            Arch::Gcn => {
                let w = &model_params[p];
                p += 1;
                conv_layer(tape, input, &adj_matrix, w, false, last)?
            }
            Arch::Sage => {
                let w = &model_params[p];
                p += 1;
                conv_layer(tape, input, &adj_matrix, w, true, last)?
            }
            Arch::Gat => {
                let mut acc: Option<Node> = None;
                for _ in 0..config.n_heads {
                    let w = &model_params[p];
                    let a = &model_params[p + 1];
                    p += 2;
                    let (head_out, _alpha) =
                        gat_head_forward(tape, &input, w, a, &src, &dst, n_nodes)?;
                    acc = Some(match acc {
                        None => head_out,
                        Some(prev) => prev.add(&head_out)?,
                    });
                }
                let mean = acc.expect("at least one head").scale(1.0 / config.n_heads as f64);
                if last {
                    mean
                } else {
                    mean.elu()
                }
            }
        };
        hidden = Some(out);
    }
    Ok(hidden.expect("at least one layer"))
}

/// Registers every model parameter as a differentiable leaf, in declaration
/// order.
pub fn register_params(tape: &Tape, params: &[&Tensor]) -> Vec<Node> {
    params.iter().map(|p| tape.leaf((*p).clone())).collect()
}

/// Affine layer of the server classifier. Hidden layers apply ReLU unless
/// constructed as purely linear (stacked affine maps).
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
    pub linear: bool,
}

impl Affine {
    pub fn new(w: Tensor, b: Tensor) -> Self {
        Self {
            w,
            b,
            linear: false,
        }
    }
}

/// Server-side classifier: affine layers with ReLU between them, ending in
/// `n_classes` logits. The 1-layer variant is a single affine map.
#[derive(Debug, Clone)]
pub struct ServerModel {
    pub layers: Vec<Affine>,
}

impl ServerModel {
    /// Layer widths for an `n_layers`-deep candidate: hidden layers keep the
    /// input width, except the last hidden layer which halves it.
    pub fn candidate_widths(input_dim: usize, n_classes: usize, n_layers: usize) -> Vec<usize> {
        let mut widths = vec![input_dim];
        if n_layers >= 2 {
            for _ in 0..n_layers.saturating_sub(2) {
                widths.push(input_dim);
            }
            widths.push((input_dim / 2).max(1));
        }
        widths.push(n_classes);
        widths
    }

    pub fn init(widths: &[usize], rng: &mut SeedStream) -> Self {
        let layers = widths
            .windows(2)
            .map(|pair| {
                Affine::new(glorot(pair[0], pair[1], pair[0], pair[1], rng), Tensor::zeros(1, pair[1]))
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().expect("nonempty server model").w.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Forward pass over registered parameter nodes (`w0, b0, w1, b1, …`).
    pub fn classify(&self, param_nodes: &[Node], h: &Node) -> Result<Node, DiffError> {
        let mut x = h.clone();
        for (k, pair) in param_nodes.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let affine = x.matmul(w)?.add(&b.broadcast_rows(x.rows())?)?;
            x = if k + 1 == self.layers.len() || self.layers[k].linear {
                affine
            } else {
                affine.relu()
            };
        }
        Ok(x)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    n_layers: usize,
    hidden_dim: usize,
    n_heads: usize,
    shapes: Vec<(usize, usize)>,
    seed: u64,
}

/// Writes a local model checkpoint: one JSON header line, then the raw
/// little-endian 64-bit float payload of every parameter tensor in
/// declaration order.
pub fn save_checkpoint(
    model: &LocalModel,
    seed: u64,
    path: &std::path::Path,
) -> std::io::Result<()> {
    use std::io::Write;
    let header = CheckpointHeader {
        arch: model.config.arch,
        n_layers: model.config.n_layers,
        hidden_dim: model.config.hidden_dim,
        n_heads: model.config.n_heads,
        shapes: model.params().iter().map(|p| p.shape()).collect(),
        seed,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for p in model.params() {
        for v in p.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()
}

/// Reads a checkpoint back into a local model (plus the stored seed).
pub fn load_checkpoint(path: &std::path::Path) -> std::io::Result<(LocalModel, u64)> {
    use std::io::{BufRead, Read};
    let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    f.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("bad header: {e}")))?;

    let config = GnnConfig {
        arch: header.arch,
        n_layers: header.n_layers,
        hidden_dim: header.hidden_dim,
        n_heads: header.n_heads,
    };
    let in_dim = match header.arch {
        Arch::Sage => header.shapes.first().map(|s| s.1),
        _ => header.shapes.first().map(|s| s.0),
    }
    .ok_or_else(|| bad("checkpoint with no parameters".into()))?;

    let mut model = LocalModel::init(config, in_dim, &mut SeedStream::new(0));
    let expected: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();
    if expected != header.shapes {
        return Err(bad(format!(
            "checkpoint shapes {:?} do not match architecture {:?}",
            header.shapes, expected
        )));
    }
    for p in model.params_mut() {
        let mut buf = [0u8; 8];
        for v in p.data_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes after payload", rest.len())));
    }
    Ok((model, header.seed))
}

/// Server-side merge of client embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Concat,
    Mean,
}

/// Combines per-client embeddings: column concatenation in client order, or
/// the elementwise mean (equal widths required).
pub fn combine(tape: &Tape, parts: &[&Node], strategy: Combine) -> Result<Node, DiffError> {
    match strategy {
        Combine::Concat => tape.concat_cols(parts),
        Combine::Mean => {
            let first = parts
                .first()
                .ok_or_else(|| DiffError::Shape("combine of zero clients".into()))?;
            let mut acc = (*first).clone();
            for p in &parts[1..] {
                acc = acc.add(p)?;
            }
            Ok(acc.scale(1.0 / parts.len() as f64))
        }
    }
}
