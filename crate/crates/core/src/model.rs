//! Compact CNN encoders with L2-normalised embeddings and a linear head.
//!
//! An [`ArchitectureSpec`] describes the layer stack declaratively; shape
//! inference runs at validation time so bad configurations fail before any
//! tensor work. [`ModelParams`] owns the named parameter tensors, knows how
//! to bind them into a [`Graph`] (as trainable leaves or frozen constants),
//! and round-trips through an on-disk checkpoint directory with per-file
//! integrity hashes.
//!
//! The [`Classifier`] trait is the attack-facing surface: anything that can
//! produce logits and embeddings for a batch can be attacked, including the
//! analytically convenient [`LinearModel`].

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// One layer of an encoder stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 2-D convolution with square kernel, zero padding and bias.
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Relu,
    /// Global average pool over the spatial axes, flattening to a vector.
    MeanPool,
    /// Fully connected layer with bias.
    Dense { width: usize },
}

/// Declarative description of an encoder plus its classification head.
///
/// The encoder maps a `[n, c, h, w]` batch to `[n, embedding_dim]`
/// L2-normalised embeddings; the head is a `[2, embedding_dim]` linear map
/// producing fake/real logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: String,
    /// Channels, height, width of one model input.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

impl ArchitectureSpec {
    /// Two-block CNN used as the default model under study.
    pub fn tiny_cnn(input_shape: [usize; 3]) -> Self {
        ArchitectureSpec {
            id: "tiny-cnn".into(),
            input_shape,
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MeanPool,
                LayerSpec::Dense { width: 16 },
            ],
            embedding_dim: 16,
        }
    }

    /// Wider sibling of `tiny-cnn`, used as a black-box surrogate.
    pub fn tiny_cnn_wide(input_shape: [usize; 3]) -> Self {
        ArchitectureSpec {
            id: "tiny-cnn-wide".into(),
            input_shape,
            layers: vec![
                LayerSpec::Conv { out_channels: 12, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 24, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MeanPool,
                LayerSpec::Dense { width: 24 },
            ],
            embedding_dim: 24,
        }
    }

    /// Minimal architecture for gradient checking: few enough parameters
    /// that central differences over all of them stay cheap.
    pub fn micro_cnn(input_shape: [usize; 3]) -> Self {
        ArchitectureSpec {
            id: "micro-cnn".into(),
            input_shape,
            layers: vec![
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MeanPool,
                LayerSpec::Dense { width: 3 },
            ],
            embedding_dim: 3,
        }
    }

    /// Looks up a named architecture.
    pub fn by_id(id: &str, input_shape: [usize; 3]) -> Result<Self> {
        match id {
            "tiny-cnn" => Ok(Self::tiny_cnn(input_shape)),
            "tiny-cnn-wide" => Ok(Self::tiny_cnn_wide(input_shape)),
            "micro-cnn" => Ok(Self::micro_cnn(input_shape)),
            other => Err(Error::InvalidConfig(format!("unknown architecture id '{other}'"))),
        }
    }

    /// Runs shape inference over the stack and returns the parameter list
    /// (name, shape) in binding order, head included last.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::InvalidConfig(format!(
                "architecture '{}': input shape {:?} has a zero extent",
                self.id, self.input_shape
            )));
        }
        let mut params = Vec::new();
        // None while still spatial [c, h, w]; Some(dim) once flattened.
        let mut spatial: Option<(usize, usize, usize)> = Some((c0, h0, w0));
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let Some((c, h, w)) = spatial else {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': conv at layer {i} after flattening",
                            self.id
                        )));
                    };
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': conv at layer {i} has a zero hyperparameter",
                            self.id
                        )));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': conv at layer {i} kernel {kernel} exceeds padded input {}x{}",
                            self.id,
                            h + 2 * pad,
                            w + 2 * pad
                        )));
                    }
                    params.push((format!("conv{i}.weight"), vec![*out_channels, c, *kernel, *kernel]));
                    params.push((format!("conv{i}.bias"), vec![*out_channels]));
                    let h2 = (h + 2 * pad - kernel) / stride + 1;
                    let w2 = (w + 2 * pad - kernel) / stride + 1;
                    spatial = Some((*out_channels, h2, w2));
                }
                LayerSpec::Relu => {}
                LayerSpec::MeanPool => {
                    let Some((c, _, _)) = spatial else {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': second flatten at layer {i}",
                            self.id
                        )));
                    };
                    spatial = None;
                    flat = Some(c);
                }
                LayerSpec::Dense { width } => {
                    let Some(dim) = flat else {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': dense at layer {i} before mean pooling",
                            self.id
                        )));
                    };
                    if *width == 0 {
                        return Err(Error::InvalidConfig(format!(
                            "architecture '{}': dense at layer {i} has zero width",
                            self.id
                        )));
                    }
                    params.push((format!("dense{i}.weight"), vec![dim, *width]));
                    params.push((format!("dense{i}.bias"), vec![*width]));
                    flat = Some(*width);
                }
            }
        }
        let Some(final_dim) = flat else {
            return Err(Error::InvalidConfig(format!(
                "architecture '{}': stack never flattens to an embedding",
                self.id
            )));
        };
        if final_dim != self.embedding_dim {
            return Err(Error::InvalidConfig(format!(
                "architecture '{}': stack produces dimension {final_dim}, declared embedding_dim {}",
                self.id, self.embedding_dim
            )));
        }
        params.push(("head.weight".into(), vec![2, self.embedding_dim]));
        Ok(params)
    }
}

/// Named parameter tensors for one architecture, in binding order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchitectureSpec,
    tensors: Vec<(String, Tensor)>,
}

/// Checkpoint manifest written next to the parameter tensors.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    architecture: ArchitectureSpec,
    params: Vec<CheckpointParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(t.numel() * 8 + 32);
    t.write_to(&mut buf).expect("in-memory write cannot fail");
    buf
}

/// He-uniform initialisation of all parameters, deterministic in `seed`.
/// Weights are uniform in `±sqrt(6 / fan_in)`; biases are uniform in
/// `±0.05` — a dead-relu block would otherwise collapse an embedding to
/// exactly zero, which the normaliser rejects by design.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    let shapes = arch.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let tensor = if name.ends_with(".bias") {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-0.05..0.05)).collect();
            Tensor::new(shape, data)?
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                // Dense weights are [in, out]; the head is [2, dim].
                if name == "head.weight" {
                    shape[1]
                } else {
                    shape[0]
                }
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        tensors.push((name, tensor));
    }
    Ok(ModelParams { arch: arch.clone(), tensors })
}

impl ModelParams {
    /// Reassembles params from tensors, validating names and shapes against
    /// the architecture.
    pub fn from_tensors(arch: ArchitectureSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = arch.param_shapes()?;
        if expected.len() != tensors.len() {
            return Err(Error::InvalidConfig(format!(
                "architecture '{}' expects {} parameters, got {}",
                arch.id,
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter mismatch: expected {en} {es:?}, got {n} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { arch, tensors })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every parameter into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let nodes = self.tensors.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        BoundModel { arch: self.arch.clone(), nodes }
    }

    /// Convenience forward pass: batch of inputs to unit-norm embeddings.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let bound = self.bind(&mut g, false);
        let emb = bound.encode(&mut g, xn)?;
        Ok(g.value(emb).clone())
    }

    /// Convenience forward pass: batch of inputs to `[n, 2]` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let bound = self.bind(&mut g, false);
        let out = bound.logits(&mut g, xn)?;
        Ok(g.value(out).clone())
    }

    /// Digest of architecture and parameter bytes; stable across processes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update(tensor_bytes(t));
        }
        hex::encode(h.finalize())
    }

    /// Writes `manifest.json` plus one tensor file per parameter into `dir`
    /// (created if absent).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.tensor");
            let bytes = tensor_bytes(t);
            fs::write(dir.join(&file), &bytes)?;
            entries.push(CheckpointParam {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = CheckpointManifest {
            format_version: 1,
            architecture: self.arch.clone(),
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint directory, verifying per-file digests and that the
    /// parameter set matches the declared architecture.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let raw = fs::read(&manifest_path)
            .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::Artifact(format!("bad checkpoint manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(Error::Artifact(format!(
                "unsupported checkpoint format_version {}",
                manifest.format_version
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.params.len());
        for p in &manifest.params {
            let path = dir.join(&p.file);
            let bytes = fs::read(&path)
                .map_err(|e| Error::Artifact(format!("cannot read {}: {e}", path.display())))?;
            if sha256_hex(&bytes) != p.sha256 {
                return Err(Error::Artifact(format!(
                    "checkpoint tensor {} fails integrity check",
                    p.file
                )));
            }
            let t = Tensor::read_from(&mut bytes.as_slice())?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Artifact(format!(
                    "checkpoint tensor {} has shape {:?}, manifest says {:?}",
                    p.file,
                    t.shape(),
                    p.shape
                )));
            }
            tensors.push((p.name.clone(), t));
        }
        ModelParams::from_tensors(manifest.architecture, tensors)
            .map_err(|e| Error::Artifact(format!("checkpoint does not match architecture: {e}")))
    }
}

/// Parameters bound into a specific graph, ready to build forward passes.
pub struct BoundModel {
    arch: ArchitectureSpec,
    nodes: Vec<NodeId>,
}

impl BoundModel {
    /// Rebuilds a bound model from externally created parameter nodes, in
    /// the order of [`ArchitectureSpec::param_shapes`]. Used by gradient
    /// checks that slice all parameters out of one flat input.
    pub fn from_nodes(arch: ArchitectureSpec, nodes: Vec<NodeId>) -> Result<Self> {
        let expected = arch.param_shapes()?;
        if expected.len() != nodes.len() {
            return Err(Error::InvalidConfig(format!(
                "architecture '{}' expects {} parameters, got {} nodes",
                arch.id,
                expected.len(),
                nodes.len()
            )));
        }
        Ok(BoundModel { arch, nodes })
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Forward pass from a `[n, c, h, w]` batch node to `[n, embedding_dim]`
    /// unit-norm embeddings.
    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let [c, h, w] = self.arch.input_shape;
        let got = g.value(x).shape().to_vec();
        if got.len() != 4 || got[1] != c || got[2] != h || got[3] != w {
            return Err(Error::ShapeMismatch {
                op: "encode".into(),
                detail: format!(
                    "architecture '{}' expects [n, {c}, {h}, {w}], got {got:?}",
                    self.arch.id
                ),
            });
        }
        let mut cur = x;
        let mut next_param = 0usize;
        for layer in &self.arch.layers {
            match layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let w_id = self.nodes[next_param];
                    let b_id = self.nodes[next_param + 1];
                    next_param += 2;
                    cur = g.conv2d(cur, w_id, Some(b_id), *stride, *pad)?;
                }
                LayerSpec::Relu => {
                    cur = g.relu(cur)?;
                }
                LayerSpec::MeanPool => {
                    cur = g.global_avg_pool(cur)?;
                }
                LayerSpec::Dense { .. } => {
                    let w_id = self.nodes[next_param];
                    let b_id = self.nodes[next_param + 1];
                    next_param += 2;
                    let lin = g.matmul(cur, w_id)?;
                    cur = g.bias_add(lin, b_id)?;
                }
            }
        }
        g.l2_normalize(cur, 1)
    }

    /// Linear head on embeddings: `[n, d] -> [n, 2]` fake/real logits.
    pub fn classify(&self, g: &mut Graph, embeddings: NodeId) -> Result<NodeId> {
        let head = *self.nodes.last().expect("head is always present");
        let head_t = g.transpose2d(head)?;
        g.matmul(embeddings, head_t)
    }

    /// Full forward pass to logits.
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let emb = self.encode(g, x)?;
        self.classify(g, emb)
    }
}

/// Anything attacks can differentiate through: a logits head and an
/// embedding head over the same input batch.
pub trait Classifier {
    /// Channels, height, width of one input.
    fn input_shape(&self) -> [usize; 3];

    /// Builds `[n, 2]` logits for a `[n, c, h, w]` batch node.
    fn logits_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;

    /// Builds `[n, d]` embeddings for the same batch node.
    fn embed_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;

    /// Probability assigned to the "real" class (label 1) per sample.
    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let logits = self.logits_graph(&mut g, xn)?;
        let lsm = g.log_softmax(logits)?;
        let v = g.value(lsm);
        let n = v.shape()[0];
        Ok((0..n).map(|r| v.data()[r * 2 + 1].exp()).collect())
    }

    /// Hard predictions: 1 where the real logit dominates.
    fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self.scores(x)?.into_iter().map(|s| u8::from(s >= 0.5)).collect())
    }
}

impl Classifier for ModelParams {
    fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    fn logits_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let bound = self.bind(g, false);
        bound.logits(g, x)
    }

    fn embed_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let bound = self.bind(g, false);
        bound.encode(g, x)
    }
}

/// Linear-in-the-input classifier: logits are an affine map of the
/// flattened batch. Attack properties (single-step optima, vertex
/// solutions) hold exactly for this model, which makes it the reference
/// implementation for attack tests.
#[derive(Debug, Clone)]
pub struct LinearModel {
    input_shape: [usize; 3],
    /// `[2, c*h*w]` weight matrix.
    weights: Tensor,
    /// `[2]` bias.
    bias: Tensor,
}

impl LinearModel {
    pub fn new(input_shape: [usize; 3], weights: Tensor, bias: Tensor) -> Result<Self> {
        let numel = input_shape[0] * input_shape[1] * input_shape[2];
        if weights.shape() != [2, numel] {
            return Err(Error::ShapeMismatch {
                op: "linear model".into(),
                detail: format!("weights {:?}, expected [2, {numel}]", weights.shape()),
            });
        }
        if bias.shape() != [2] {
            return Err(Error::ShapeMismatch {
                op: "linear model".into(),
                detail: format!("bias {:?}, expected [2]", bias.shape()),
            });
        }
        Ok(LinearModel { input_shape, weights, bias })
    }

    /// Random linear model, deterministic in `seed`.
    pub fn random(input_shape: [usize; 3], seed: u64) -> Self {
        let numel = input_shape[0] * input_shape[1] * input_shape[2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = Tensor::new(vec![2, numel], data).expect("finite random weights");
        let bias = Tensor::new(vec![2], vec![rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)])
            .expect("finite random bias");
        LinearModel { input_shape, weights, bias }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }
}

impl Classifier for LinearModel {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn logits_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.value(x).shape()[0];
        let numel = self.input_shape[0] * self.input_shape[1] * self.input_shape[2];
        let flat = g.reshape(x, vec![n, numel])?;
        let w = g.constant(self.weights.clone());
        let wt = g.transpose2d(w)?;
        let lin = g.matmul(flat, wt)?;
        let b = g.constant(self.bias.clone());
        g.bias_add(lin, b)
    }

    fn embed_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let n = g.value(x).shape()[0];
        let numel = self.input_shape[0] * self.input_shape[1] * self.input_shape[2];
        let flat = g.reshape(x, vec![n, numel])?;
        g.l2_normalize(flat, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_cnn_param_shapes() {
        let arch = ArchitectureSpec::tiny_cnn([4, 32, 32]);
        let shapes = arch.param_shapes().unwrap();
        let names: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv0.weight",
                "conv0.bias",
                "conv2.weight",
                "conv2.bias",
                "dense5.weight",
                "dense5.bias",
                "head.weight"
            ]
        );
        assert_eq!(shapes[0].1, vec![8, 4, 3, 3]);
        assert_eq!(shapes[4].1, vec![16, 16]);
        assert_eq!(shapes[6].1, vec![2, 16]);
    }

    #[test]
    fn dense_before_pool_is_rejected() {
        let arch = ArchitectureSpec {
            id: "bad".into(),
            input_shape: [1, 8, 8],
            layers: vec![LayerSpec::Dense { width: 4 }],
            embedding_dim: 4,
        };
        assert!(matches!(arch.param_shapes(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn embedding_dim_disagreement_is_rejected() {
        let mut arch = ArchitectureSpec::tiny_cnn([4, 32, 32]);
        arch.embedding_dim = 7;
        assert!(matches!(arch.param_shapes(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let arch = ArchitectureSpec::tiny_cnn([4, 16, 16]);
        let a = init_params(&arch, 11).unwrap();
        let b = init_params(&arch, 11).unwrap();
        let c = init_params(&arch, 12).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn encode_produces_unit_rows() {
        let arch = ArchitectureSpec::tiny_cnn([2, 8, 8]);
        let params = init_params(&arch, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 2 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(vec![3, 2, 8, 8], data).unwrap();
        let emb = params.encode(&x).unwrap();
        assert_eq!(emb.shape(), &[3, 16]);
        for r in 0..3 {
            let norm: f64 =
                emb.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "row {r} norm {norm}");
        }
    }

    #[test]
    fn encode_rejects_wrong_input_shape() {
        let arch = ArchitectureSpec::tiny_cnn([2, 8, 8]);
        let params = init_params(&arch, 0).unwrap();
        let x = Tensor::zeros(vec![1, 3, 8, 8]);
        assert!(matches!(params.encode(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn logits_have_two_columns() {
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, 3).unwrap();
        let x = Tensor::full(vec![2, 1, 4, 4], 0.3).unwrap();
        let logits = params.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
    }

    #[test]
    fn scores_are_probabilities() {
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, 3).unwrap();
        let x = Tensor::full(vec![4, 1, 4, 4], 0.6).unwrap();
        for s in params.scores(&x).unwrap() {
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchitectureSpec::tiny_cnn([2, 8, 8]);
        let params = init_params(&arch, 42).unwrap();
        params.save_checkpoint(dir.path()).unwrap();
        let loaded = ModelParams::load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.content_hash(), params.content_hash());
        assert_eq!(loaded.arch(), params.arch());
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, 1).unwrap();
        params.save_checkpoint(dir.path()).unwrap();
        let victim = dir.path().join("head.weight.tensor");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let err = ModelParams::load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Artifact(_)), "got {err:?}");
    }

    #[test]
    fn missing_tensor_file_is_an_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, 1).unwrap();
        params.save_checkpoint(dir.path()).unwrap();
        fs::remove_file(dir.path().join("conv0.weight.tensor")).unwrap();
        let err = ModelParams::load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Artifact(_)));
    }

    #[test]
    fn linear_model_logits_are_affine() {
        let model = LinearModel::random([1, 3, 3], 9);
        let x0 = Tensor::zeros(vec![1, 1, 3, 3]);
        let x1 = Tensor::full(vec![1, 1, 3, 3], 0.25).unwrap();
        let x2 = Tensor::full(vec![1, 1, 3, 3], 0.5).unwrap();
        let mut g = Graph::new();
        let logits = |g: &mut Graph, x: &Tensor, m: &LinearModel| {
            let xn = g.constant(x.clone());
            let l = m.logits_graph(g, xn).unwrap();
            g.value(l).data().to_vec()
        };
        let l0 = logits(&mut g, &x0, &model);
        let l1 = logits(&mut g, &x1, &model);
        let l2 = logits(&mut g, &x2, &model);
        // Affine: f(2t) - f(0) = 2 (f(t) - f(0)).
        for j in 0..2 {
            assert!((l2[j] - l0[j] - 2.0 * (l1[j] - l0[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        use crate::tensor::grad_check;
        let arch = ArchitectureSpec::micro_cnn([1, 4, 4]);
        let params = init_params(&arch, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(0.1..0.9)).collect();
        let x = Tensor::new(vec![2, 1, 4, 4], data).unwrap();
        let report = grad_check(
            move |g, xn| {
                let emb = params.embed_graph(g, xn)?;
                g.mean(emb)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn architecture_spec_serde_roundtrip() {
        let arch = ArchitectureSpec::tiny_cnn_wide([4, 32, 32]);
        let json = serde_json::to_string(&arch).unwrap();
        let back: ArchitectureSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, arch);
    }
}
