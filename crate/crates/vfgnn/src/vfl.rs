//! The vertical federated training loop.
//!
//! Per epoch: every client computes local embeddings on its feature slice
//! and partial graph; the server combines them, computes the masked
//! cross-entropy against its private labels, and returns per-client
//! embedding gradients (optionally passed through a defense transform);
//! each client then derives its local parameter gradients from the released
//! packet and applies its update. The gradient stream seen by one client can
//! be persisted to a binary trace for offline analysis.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use thiserror::Error;

use crate::defense::DefenseConfig;
use crate::diffcore::{
    adam_step, cross_entropy_soft, AdamState, Node, SeedStream, Tape, Tensor,
};
use crate::gnn::{
    combine, local_forward, register_params, Combine, FeatureInput, GnnConfig, LocalModel,
    ServerModel,
};
use crate::graphdata::{normalize_adjacency, Graph, NormalizedAdjacency, VerticalPartition};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("stale packet: epoch {got} applied at epoch {expected}")]
    StalePacket { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trace format error at byte {offset}: {message}")]
    TraceFormat { offset: u64, message: String },

    #[error("trace append: flattened length {got} differs from {expected}")]
    TraceLength { expected: usize, got: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

/// The per-epoch embedding gradients released by the server, one tensor per
/// client, rows in train-node order.
#[derive(Debug, Clone)]
pub struct GradientPacket {
    pub epoch: usize,
    pub grads: Vec<Tensor>,
}

/// One client: its local encoder, feature slice, partial-graph adjacency,
/// and optimizer state.
pub struct Client {
    pub model: LocalModel,
    pub features: FeatureInput,
    pub adj: NormalizedAdjacency,
    opt: Vec<AdamState>,
}

/// A client's recorded forward pass for the current epoch, kept alive so the
/// received packet can seed the local backward pass.
pub struct ClientForward {
    pub tape: Tape,
    pub h: Node,
    pub param_nodes: Vec<Node>,
}

/// Everything an experiment needs from one training epoch. The attacking
/// client's view is the packet entry and flat gradient for its own index.
pub struct EpochOutput {
    pub epoch: usize,
    pub packet: GradientPacket,
    /// Flattened local-model gradients of client 0, in declaration order.
    pub attacker_flat: Tensor,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// One vertical federated system: clients plus the label-holding server.
/// Labels and server parameters are private to this struct; nothing in the
/// per-epoch outputs carries them.
pub struct VflSystem {
    clients: Vec<Client>,
    server: ServerModel,
    server_opt: Vec<AdamState>,
    combine: Combine,
    main_lr: f64,
    weight_decay: f64,
    epoch: usize,
    n_nodes: usize,
    n_classes: usize,
    labels: Vec<usize>,
    train_idx: Rc<Vec<usize>>,
    test_idx: Vec<usize>,
    target_soft: Tensor,
}

impl VflSystem {
    /// Assembles a system from a graph and its vertical partition. Client
    /// `i` is initialized from the stream `derive(seed, "client/i")`, the
    /// server from `derive(seed, "server")`.
    pub fn build(
        graph: &Graph,
        partition: &VerticalPartition,
        gnn_cfg: GnnConfig,
        combine: Combine,
        server_layers: usize,
        main_lr: f64,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        let train_idx: Vec<usize> = graph.train_nodes();
        if train_idx.is_empty() {
            return Err(ProtocolError::Config("empty train mask".into()));
        }
        let mut clients = Vec::with_capacity(partition.n_clients);
        for i in 0..partition.n_clients {
            let slice = &partition.client_feature_slices[i];
            let features = FeatureInput::from_columns(&graph.features, slice)?;
            let adj = normalize_adjacency(graph, &partition.client_edges[i], gnn_cfg.arch.scheme())
                .map_err(|e| ProtocolError::Config(format!("client {i} adjacency: {e}")))?;
            let mut rng = SeedStream::new(SeedStream::derive(seed, &format!("client/{i}")));
            let model = LocalModel::init(gnn_cfg, slice.len(), &mut rng);
            let opt = model.params().iter().map(|p| AdamState::for_param(p)).collect();
            clients.push(Client {
                model,
                features,
                adj,
                opt,
            });
        }

        let input_dim = match combine {
            Combine::Concat => gnn_cfg.hidden_dim * partition.n_clients,
            Combine::Mean => gnn_cfg.hidden_dim,
        };
        let widths = ServerModel::candidate_widths(input_dim, graph.n_classes, server_layers);
        let mut server_rng = SeedStream::new(SeedStream::derive(seed, "server"));
        let server = ServerModel::init(&widths, &mut server_rng);
        let server_opt = server.params().iter().map(|p| AdamState::for_param(p)).collect();

        let target_soft = soft_targets(&graph.labels, &train_idx, graph.n_classes);
        Ok(Self {
            clients,
            server,
            server_opt,
            combine,
            main_lr,
            weight_decay: 0.0,
            epoch: 0,
            n_nodes: graph.n_nodes,
            n_classes: graph.n_classes,
            labels: graph.labels.clone(),
            train_idx: Rc::new(train_idx),
            test_idx: graph.test_nodes(),
            target_soft,
        })
    }

    /// L2 regularization applied by every party's local update (the released
    /// gradients are the pure loss gradients; the decay term is each party's
    /// own optimizer detail).
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_idx(&self) -> &Rc<Vec<usize>> {
        &self.train_idx
    }

    pub fn client(&self, i: usize) -> &Client {
        &self.clients[i]
    }

    pub fn combine_strategy(&self) -> Combine {
        self.combine
    }

    pub fn server_arch(&self) -> Vec<usize> {
        let mut widths = vec![self.server.input_dim()];
        widths.extend(self.server.layers.iter().map(|l| l.w.cols()));
        widths
    }

    /// Simulator instrumentation: ground-truth labels for scoring attacks.
    /// Not part of any client-facing interface.
    pub fn ground_truth_labels(&self) -> &[usize] {
        &self.labels
    }

    /// Runs one federated epoch, applying `defense` to the released
    /// per-client embedding gradients.
    pub fn train_epoch(&mut self, defense: &DefenseConfig) -> Result<EpochOutput, ProtocolError> {
        let epoch = self.epoch;
        let ctxs: Vec<ClientForward> = self
            .clients
            .iter()
            .map(|c| client_forward(c))
            .collect::<Result<_, _>>()?;

        // Server side: combine received embeddings, classify, masked loss.
        let stape = Tape::new();
        let h_leaves: Vec<Node> = ctxs.iter().map(|c| stape.leaf(c.h.value())).collect();
        let h_refs: Vec<&Node> = h_leaves.iter().collect();
        let combined = combine(&stape, &h_refs, self.combine)?;
        let sp_nodes = register_params(&stape, &self.server.params());
        let logits = self.server.classify(&sp_nodes, &combined)?;
        let loss = main_loss(&logits, &self.target_soft, &self.train_idx)?;

        let mut wrt: Vec<&Node> = h_leaves.iter().collect();
        wrt.extend(sp_nodes.iter());
        let grads = loss.grad_values(&wrt)?;

        // Release defended packets (train rows only; other rows are zero
        // under the full-batch masked loss).
        let released: Vec<Tensor> = grads[..self.clients.len()]
            .iter()
            .enumerate()
            .map(|(i, full)| {
                let rows = gather_rows_value(full, &self.train_idx);
                defense.apply(&rows, epoch, i)
            })
            .collect();
        let packet = GradientPacket {
            epoch,
            grads: released,
        };

        // Server applies its own (undefended) update.
        let server_grads = &grads[self.clients.len()..];
        for ((p, g), st) in self
            .server
            .params_mut()
            .into_iter()
            .zip(server_grads)
            .zip(self.server_opt.iter_mut())
        {
            decayed_adam_step(p, g, st, self.main_lr, self.weight_decay)?;
        }

        // Clients derive local gradients from the released packet and update.
        let mut attacker_flat = None;
        for (i, ctx) in ctxs.iter().enumerate() {
            let per_param =
                client_local_gradients(ctx, &packet, i, epoch, self.n_nodes, &self.train_idx)?;
            if i == 0 {
                attacker_flat = Some(flatten_tensors(&per_param));
            }
            let client = &mut self.clients[i];
            for ((p, g), st) in client
                .model
                .params_mut()
                .into_iter()
                .zip(per_param.iter())
                .zip(client.opt.iter_mut())
            {
                decayed_adam_step(p, g, st, self.main_lr, self.weight_decay)?;
            }
        }

        let logits_val = logits.value();
        let train_acc = accuracy(&logits_val, &self.labels, &self.train_idx);
        let test_acc = accuracy(&logits_val, &self.labels, &self.test_idx);
        let loss_val = loss.value().item()?;
        self.epoch += 1;

        Ok(EpochOutput {
            epoch,
            packet,
            attacker_flat: attacker_flat.expect("at least one client"),
            loss: loss_val,
            train_acc,
            test_acc,
        })
    }

    /// Fraction of `mask` nodes whose argmax logit equals the label, from a
    /// fresh (unrecorded) forward pass.
    pub fn evaluate(&self, mask: &[bool]) -> Result<f64, ProtocolError> {
        let idx: Vec<usize> = (0..self.n_nodes).filter(|&v| mask[v]).collect();
        let logits = self.forward_logits()?;
        Ok(accuracy(&logits, &self.labels, &idx))
    }

    fn forward_logits(&self) -> Result<Tensor, ProtocolError> {
        let ctxs: Vec<ClientForward> = self
            .clients
            .iter()
            .map(|c| client_forward(c))
            .collect::<Result<_, _>>()?;
        let stape = Tape::new();
        let h_leaves: Vec<Node> = ctxs.iter().map(|c| stape.constant(c.h.value())).collect();
        let h_refs: Vec<&Node> = h_leaves.iter().collect();
        let combined = combine(&stape, &h_refs, self.combine)?;
        let sp_nodes = register_params(&stape, &self.server.params());
        Ok(self.server.classify(&sp_nodes, &combined)?.value())
    }
}

/// Records a client's forward pass on a fresh tape.
pub fn client_forward(client: &Client) -> Result<ClientForward, ProtocolError> {
    let tape = Tape::new();
    let param_nodes = register_params(&tape, &client.model.params());
    let h = local_forward(
        &tape,
        &param_nodes,
        &client.model.config,
        &client.features,
        &client.adj,
    )?;
    Ok(ClientForward {
        tape,
        h,
        param_nodes,
    })
}

/// Masked main-task loss: softmax cross entropy between the train-row logits
/// and the softened one-hot targets.
pub fn main_loss(
    logits: &Node,
    target_soft: &Tensor,
    train_idx: &Rc<Vec<usize>>,
) -> Result<Node, ProtocolError> {
    if train_idx.is_empty() {
        return Err(ProtocolError::Config("empty train mask".into()));
    }
    let train_logits = logits.gather_rows(train_idx)?;
    let p = train_logits.softmax_rows()?;
    let tgt = logits.tape().constant(target_soft.clone());
    Ok(cross_entropy_soft(&p, &tgt)?)
}

/// Chain-rule gradients of all client parameters given the released packet
/// as upstream seed, in declaration order.
pub fn client_local_gradients(
    ctx: &ClientForward,
    packet: &GradientPacket,
    client_id: usize,
    current_epoch: usize,
    n_nodes: usize,
    train_idx: &[usize],
) -> Result<Vec<Tensor>, ProtocolError> {
    if packet.epoch != current_epoch {
        return Err(ProtocolError::StalePacket {
            expected: current_epoch,
            got: packet.epoch,
        });
    }
    let rows = &packet.grads[client_id];
    let h_cols = ctx.h.cols();
    let mut seed = Tensor::zeros(n_nodes, h_cols);
    for (r, &v) in train_idx.iter().enumerate() {
        seed.data_mut()[v * h_cols..(v + 1) * h_cols].copy_from_slice(rows.row(r));
    }
    let refs: Vec<&Node> = ctx.param_nodes.iter().collect();
    Ok(ctx.h.vjp_values(&seed, &refs)?)
}

/// Adam update with L2 regularization folded into the gradient.
pub fn decayed_adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), ProtocolError> {
    if weight_decay == 0.0 {
        adam_step(param, grad, state, lr)?;
    } else {
        let decayed = grad.zip(&param.map(|p| p * weight_decay), |g, d| g + d)?;
        adam_step(param, &decayed, state, lr)?;
    }
    Ok(())
}

/// Softmax of the one-hot label rows for the given nodes — the targets the
/// loss compares against.
pub fn soft_targets(labels: &[usize], idx: &[usize], n_classes: usize) -> Tensor {
    let hot = 1.0f64.exp();
    let denom = hot + (n_classes as f64 - 1.0);
    let mut t = Tensor::full(idx.len(), n_classes, 1.0 / denom);
    for (r, &v) in idx.iter().enumerate() {
        t.set(r, labels[v], hot / denom);
    }
    t
}

/// Fraction of the given nodes whose argmax logit equals their label.
pub fn accuracy(logits: &Tensor, labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let correct = idx
        .iter()
        .filter(|&&v| argmax(logits.row(v)) == labels[v])
        .count();
    correct as f64 / idx.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Concatenates tensors into a single `1×L` row, preserving order.
pub fn flatten_tensors(parts: &[Tensor]) -> Tensor {
    let len = parts.iter().map(Tensor::len).sum();
    let mut data = Vec::with_capacity(len);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(1, len, data).expect("flatten shape")
}

/// Splits a flat `1×L` row back into tensors with the given shapes.
pub fn unflatten(flat: &Tensor, shapes: &[(usize, usize)]) -> Result<Vec<Tensor>, ProtocolError> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if flat.len() != total {
        return Err(ProtocolError::TraceLength {
            expected: total,
            got: flat.len(),
        });
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(r, c) in shapes {
        let part = flat.data()[offset..offset + r * c].to_vec();
        out.push(Tensor::new(r, c, part)?);
        offset += r * c;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient trace persistence
// ---------------------------------------------------------------------------

const TRACE_MAGIC: &[u8; 8] = b"BSTRACE1";

/// One persisted epoch of the attacker-visible gradient stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEpoch {
    pub index: u64,
    pub mean_abs: f64,
    pub grad: Vec<f64>,
}

/// Ordered per-epoch records of one client's flattened local-model
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace {
    flat_len: usize,
    epochs: Vec<TraceEpoch>,
}

impl GradientTrace {
    pub fn new(flat_len: usize) -> Self {
        Self {
            flat_len,
            epochs: Vec::new(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.flat_len
    }

    pub fn epochs(&self) -> &[TraceEpoch] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn record(&mut self, epoch: usize, flat: &Tensor) -> Result<(), ProtocolError> {
        if flat.len() != self.flat_len {
            return Err(ProtocolError::TraceLength {
                expected: self.flat_len,
                got: flat.len(),
            });
        }
        let mean_abs = flat.data().iter().map(|v| v.abs()).sum::<f64>() / flat.len() as f64;
        self.epochs.push(TraceEpoch {
            index: epoch as u64,
            mean_abs,
            grad: flat.data().to_vec(),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), ProtocolError> {
        let io_err = |source| ProtocolError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        f.write_all(TRACE_MAGIC).map_err(io_err)?;
        f.write_all(&(self.flat_len as u64).to_le_bytes()).map_err(io_err)?;
        f.write_all(&(self.epochs.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        for e in &self.epochs {
            f.write_all(&e.index.to_le_bytes()).map_err(io_err)?;
            f.write_all(&e.mean_abs.to_le_bytes()).map_err(io_err)?;
            for v in &e.grad {
                f.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        f.flush().map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self, ProtocolError> {
        let io_err = |source| ProtocolError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut offset = 0u64;
        let mut read_exact = |buf: &mut [u8], what: &str| -> Result<(), ProtocolError> {
            f.read_exact(buf).map_err(|_| ProtocolError::TraceFormat {
                offset,
                message: format!("truncated while reading {what}"),
            })?;
            offset += buf.len() as u64;
            Ok(())
        };

        let mut magic = [0u8; 8];
        read_exact(&mut magic, "magic")?;
        if &magic != TRACE_MAGIC {
            return Err(ProtocolError::TraceFormat {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let mut u64buf = [0u8; 8];
        read_exact(&mut u64buf, "flat length")?;
        let flat_len = u64::from_le_bytes(u64buf) as usize;
        read_exact(&mut u64buf, "epoch count")?;
        let n_epochs = u64::from_le_bytes(u64buf) as usize;
        if n_epochs == 0 {
            return Err(ProtocolError::TraceFormat {
                offset: 16,
                message: "empty trace".into(),
            });
        }

        let mut epochs = Vec::with_capacity(n_epochs);
        for _ in 0..n_epochs {
            read_exact(&mut u64buf, "epoch index")?;
            let index = u64::from_le_bytes(u64buf);
            read_exact(&mut u64buf, "mean abs")?;
            let mean_abs = f64::from_le_bytes(u64buf);
            let mut grad = Vec::with_capacity(flat_len);
            for _ in 0..flat_len {
                read_exact(&mut u64buf, "gradient value")?;
                grad.push(f64::from_le_bytes(u64buf));
            }
            epochs.push(TraceEpoch {
                index,
                mean_abs,
                grad,
            });
        }
        Ok(Self { flat_len, epochs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{partition_vertical, synth_sbm};

    fn toy_system(seed: u64) -> VflSystem {
        let graph = synth_sbm(24, 2, 0.6, 0.05, 6, seed).unwrap();
        let partition = partition_vertical(&graph, 2, seed).unwrap();
        let cfg = GnnConfig {
            arch: crate::gnn::Arch::Gcn,
            n_layers: 2,
            hidden_dim: 4,
            n_heads: 1,
        };
        VflSystem::build(&graph, &partition, cfg, Combine::Concat, 1, 0.01, seed).unwrap()
    }

    #[test]
    fn undefended_client_gradients_match_end_to_end_backward() {
        // Oracle: one joint tape differentiating the loss straight through
        // client and server, compared to the protocol's two-stage path.
        let graph = synth_sbm(16, 2, 0.6, 0.05, 6, 3).unwrap();
        let partition = partition_vertical(&graph, 2, 3).unwrap();
        let cfg = GnnConfig {
            arch: crate::gnn::Arch::Gcn,
            n_layers: 2,
            hidden_dim: 3,
            n_heads: 1,
        };
        let mut system =
            VflSystem::build(&graph, &partition, cfg, Combine::Concat, 1, 0.01, 3).unwrap();

        // Joint-tape oracle computed from the same initial parameters.
        let tape = Tape::new();
        let mut all_param_nodes = Vec::new();
        let mut h_nodes = Vec::new();
        for c in &system.clients {
            let p_nodes = register_params(&tape, &c.model.params());
            let h = local_forward(&tape, &p_nodes, &c.model.config, &c.features, &c.adj).unwrap();
            h_nodes.push(h);
            all_param_nodes.push(p_nodes);
        }
        let h_refs: Vec<&Node> = h_nodes.iter().collect();
        let combined = combine(&tape, &h_refs, Combine::Concat).unwrap();
        let sp = register_params(&tape, &system.server.params());
        let logits = system.server.classify(&sp, &combined).unwrap();
        let loss = main_loss(&logits, &system.target_soft, &system.train_idx).unwrap();
        let wrt: Vec<&Node> = all_param_nodes[0].iter().collect();
        let oracle = loss.grad_values(&wrt).unwrap();
        let oracle_flat = flatten_tensors(&oracle);

        let out = system.train_epoch(&DefenseConfig::None).unwrap();
        let diff = out.attacker_flat.zip(&oracle_flat, |a, b| a - b).unwrap().l2();
        let rel = diff / oracle_flat.l2().max(1e-12);
        assert!(rel < 1e-10, "rel err {rel}");
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let graph = synth_sbm(60, 3, 0.5, 0.02, 9, 5).unwrap();
        let partition = partition_vertical(&graph, 2, 5).unwrap();
        let cfg = GnnConfig {
            arch: crate::gnn::Arch::Gcn,
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 1,
        };
        let mut system =
            VflSystem::build(&graph, &partition, cfg, Combine::Concat, 1, 0.01, 5).unwrap();
        let losses: Vec<f64> = (0..20)
            .map(|_| system.train_epoch(&DefenseConfig::None).unwrap().loss)
            .collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[15..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn identical_seeds_identical_packets() {
        let mut a = toy_system(9);
        let mut b = toy_system(9);
        for _ in 0..3 {
            let oa = a.train_epoch(&DefenseConfig::None).unwrap();
            let ob = b.train_epoch(&DefenseConfig::None).unwrap();
            assert_eq!(oa.attacker_flat, ob.attacker_flat);
            for (ga, gb) in oa.packet.grads.iter().zip(&ob.packet.grads) {
                assert_eq!(ga, gb);
            }
        }
    }

    #[test]
    fn flat_length_constant_across_epochs() {
        let mut system = toy_system(11);
        let len0 = system.train_epoch(&DefenseConfig::None).unwrap().attacker_flat.len();
        for _ in 0..4 {
            let len = system.train_epoch(&DefenseConfig::None).unwrap().attacker_flat.len();
            assert_eq!(len, len0);
        }
        assert_eq!(len0, system.client(0).model.flat_len());
    }

    #[test]
    fn stale_packet_rejected() {
        let system = toy_system(13);
        let ctx = client_forward(system.client(0)).unwrap();
        let packet = GradientPacket {
            epoch: 3,
            grads: vec![Tensor::zeros(system.train_idx.len(), 4); 2],
        };
        let err = client_local_gradients(&ctx, &packet, 0, 4, 24, &system.train_idx).unwrap_err();
        assert!(matches!(err, ProtocolError::StalePacket { .. }));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let system = toy_system(15);
        let ctx = client_forward(system.client(0)).unwrap();
        let packet = GradientPacket {
            epoch: 0,
            grads: vec![Tensor::zeros(system.train_idx.len(), 4); 2],
        };
        let grads = client_local_gradients(&ctx, &packet, 0, 0, 24, &system.train_idx).unwrap();
        for g in grads {
            assert_eq!(g, Tensor::zeros(g.rows(), g.cols()));
        }
    }

    #[test]
    fn linear_client_gradient_is_xt_times_upstream() {
        // One linear layer, no aggregation: H = X·W, so ∂l/∂W = Xᵀ·G.
        let graph = synth_sbm(6, 2, 0.9, 0.0, 4, 17).unwrap();
        let features = FeatureInput::Dense(graph.features.clone());
        let adj = normalize_adjacency(&graph, &[], crate::graphdata::AdjacencyScheme::GcnSym)
            .unwrap();
        // With no edges, gcn_sym is the identity, so the layer is X·W.
        let cfg = GnnConfig {
            arch: crate::gnn::Arch::Gcn,
            n_layers: 1,
            hidden_dim: 3,
            n_heads: 1,
        };
        let mut rng = SeedStream::new(17);
        let model = LocalModel::init(cfg, 4, &mut rng);
        let client = Client {
            model,
            features,
            adj,
            opt: Vec::new(),
        };
        let ctx = client_forward(&client).unwrap();

        let mut up_rng = SeedStream::new(18);
        let train_idx: Vec<usize> = (0..6).collect();
        let upstream =
            Tensor::new(6, 3, (0..18).map(|_| up_rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let packet = GradientPacket {
            epoch: 0,
            grads: vec![upstream.clone()],
        };
        let grads = client_local_gradients(&ctx, &packet, 0, 0, 6, &train_idx).unwrap();
        let want = graph.features.transposed().matmul(&upstream).unwrap();
        assert!(grads[0].max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn soft_targets_rows_are_softmaxed_onehot() {
        let t = soft_targets(&[1, 0], &[0, 1], 3);
        let hot = 1.0f64.exp() / (1.0f64.exp() + 2.0);
        let cold = 1.0 / (1.0f64.exp() + 2.0);
        assert!((t.get(0, 1) - hot).abs() < 1e-15);
        assert!((t.get(0, 0) - cold).abs() < 1e-15);
        assert!((t.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_loss_is_log_n() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(5, 4));
        let idx = Rc::new(vec![0usize, 2, 4]);
        let targets = soft_targets(&[0, 1, 2, 3, 0], &idx, 4);
        let loss = main_loss(&logits, &targets, &idx).unwrap();
        assert!((loss.value().item().unwrap() - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn main_loss_matches_scalar_oracle_on_onehot_logits() {
        // Logits equal to the one-hot targets; softmaxed targets are not
        // one-hot, so the loss stays positive.
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let idx = Rc::new(vec![0usize, 1]);
        let labels = vec![0usize, 1];
        let targets = soft_targets(&labels, &idx, 2);
        let loss = main_loss(&logits, &targets, &idx).unwrap().value().item().unwrap();

        // Both rows are symmetric: the label-class logit is 1, the other 0.
        let mut want = 0.0;
        for _ in 0..2 {
            let (a, b) = (1.0f64, 0.0f64);
            let m = a.max(b);
            let pa = (a - m).exp();
            let pb = (b - m).exp();
            let (pa, pb) = (pa / (pa + pb), pb / (pa + pb));
            let hot = 1.0f64.exp() / (1.0f64.exp() + 1.0);
            let cold = 1.0 / (1.0f64.exp() + 1.0);
            want -= hot * (pa + 1e-12f64).ln() + cold * (pb + 1e-12f64).ln();
        }
        want /= 2.0;
        assert!((loss - want).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn loss_invariant_under_class_relabeling() {
        let tape = Tape::new();
        let logits_v = Tensor::from_rows(&[vec![0.3, -0.8, 1.2], vec![2.0, 0.1, -0.4]]).unwrap();
        let idx = Rc::new(vec![0usize, 1]);
        let labels = vec![2usize, 0];
        let l1 = main_loss(
            &tape.leaf(logits_v.clone()),
            &soft_targets(&labels, &idx, 3),
            &idx,
        )
        .unwrap()
        .value()
        .item()
        .unwrap();

        // Swap classes 0 and 2 everywhere.
        let perm = [2usize, 1, 0];
        let mut logits_p = logits_v.clone();
        for r in 0..2 {
            for c in 0..3 {
                logits_p.set(r, perm[c], logits_v.get(r, c));
            }
        }
        let labels_p: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let l2 = main_loss(
            &tape.leaf(logits_p),
            &soft_targets(&labels_p, &idx, 3),
            &idx,
        )
        .unwrap()
        .value()
        .item()
        .unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_a_configuration_error() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(3, 2));
        let idx = Rc::new(Vec::new());
        let targets = Tensor::zeros(0, 2);
        assert!(matches!(
            main_loss(&logits, &targets, &idx),
            Err(ProtocolError::Config(_))
        ));
    }

    #[test]
    fn evaluate_counts_correct_argmax() {
        let logits = Tensor::from_rows(&[
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.7, 0.3],
            vec![0.4, 0.6],
        ])
        .unwrap();
        let labels = vec![0, 1, 1, 1];
        assert_eq!(accuracy(&logits, &labels, &[0, 1, 2, 3]), 0.75);
        assert_eq!(accuracy(&logits, &labels, &[0, 1]), 1.0);
        let constant = Tensor::zeros(4, 2);
        // Ties resolve to class 0: half right on a balanced set.
        assert_eq!(accuracy(&constant, &[0, 1, 0, 1], &[0, 1, 2, 3]), 0.5);
    }

    #[test]
    fn trace_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.trace");
        let mut trace = GradientTrace::new(4);
        trace
            .record(0, &Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap())
            .unwrap();
        trace
            .record(1, &Tensor::from_rows(&[vec![0.0, 0.25, -1.0, 8.0]]).unwrap())
            .unwrap();
        trace.write(&path).unwrap();
        let back = GradientTrace::read(&path).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn trace_file_size_is_header_plus_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.trace");
        let mut trace = GradientTrace::new(5);
        for e in 0..3 {
            trace.record(e, &Tensor::ones(1, 5)).unwrap();
        }
        trace.write(&path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // magic + flat_len + count, then per epoch: index + mean + 5 values.
        assert_eq!(len, 8 + 8 + 8 + 3 * (8 + 8 + 5 * 8));
    }

    #[test]
    fn trace_length_mismatch_rejected() {
        let mut trace = GradientTrace::new(3);
        assert!(matches!(
            trace.record(0, &Tensor::ones(1, 4)),
            Err(ProtocolError::TraceLength { .. })
        ));
    }

    #[test]
    fn empty_or_corrupt_trace_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.trace");
        std::fs::write(&path, b"BSTRACE1").unwrap();
        match GradientTrace::read(&path).unwrap_err() {
            ProtocolError::TraceFormat { offset, .. } => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }

        let empty = dir.path().join("empty.trace");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"BSTRACE1");
        bytes.extend_from_slice(&4u64.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&empty, bytes).unwrap();
        assert!(matches!(
            GradientTrace::read(&empty),
            Err(ProtocolError::TraceFormat { .. })
        ));
    }

    #[test]
    fn unflatten_roundtrip() {
        let parts = vec![Tensor::ones(2, 3), Tensor::full(1, 4, 2.0)];
        let flat = flatten_tensors(&parts);
        let back = unflatten(&flat, &[(2, 3), (1, 4)]).unwrap();
        assert_eq!(back, parts);
        assert!(unflatten(&flat, &[(2, 3)]).is_err());
    }
}

/// Helper shared with tests: extracts the given rows of a tensor by value.
pub fn gather_rows_value(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(idx.len(), t.cols());
    for (r, &v) in idx.iter().enumerate() {
        out.data_mut()[r * t.cols()..(r + 1) * t.cols()].copy_from_slice(t.row(v));
    }
    out
}
