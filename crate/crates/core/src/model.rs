//! The five networks, the grouped forward pass and the ELBO.
//!
//! A group of `K` inputs is encoded member by member. Each member gets its
//! own transformation posterior; the individual content posteriors are then
//! merged into one group content posterior, either by averaging or by taking
//! their normalized product. Every member is reconstructed from its own
//! transformation sample and the one content sample shared by the group.

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::gaussian::{self, DiagGaussian, GaussianRows, VARIANCE_FLOOR};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean of member means and of member variances.
    Average,
    /// Precision-weighted product of member posteriors.
    Product,
    /// Ungrouped training: one member, no aggregation.
    None,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Average => "average",
            AggregationMode::Product => "product",
            AggregationMode::None => "none",
        }
    }
}

/// What the content scale network's positive output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    Variance,
    Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Decoder,
    TransformationMean,
    TransformationVariance,
    ContentMean,
    ContentScale,
}

impl Network {
    pub const ALL: [Network; 5] = [
        Network::Decoder,
        Network::TransformationMean,
        Network::TransformationVariance,
        Network::ContentMean,
        Network::ContentScale,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Network::Decoder => "decoder",
            Network::TransformationMean => "transformation_mean",
            Network::TransformationVariance => "transformation_variance",
            Network::ContentMean => "content_mean",
            Network::ContentScale => "content_scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HiddenWidths {
    pub decoder: Vec<usize>,
    pub transformation_mean: Vec<usize>,
    pub transformation_variance: Vec<usize>,
    pub content_mean: Vec<usize>,
    pub content_scale: Vec<usize>,
}

impl HiddenWidths {
    pub fn uniform(widths: &[usize]) -> Self {
        HiddenWidths {
            decoder: widths.to_vec(),
            transformation_mean: widths.to_vec(),
            transformation_variance: widths.to_vec(),
            content_mean: widths.to_vec(),
            content_scale: widths.to_vec(),
        }
    }

    pub fn get(&self, net: Network) -> &[usize] {
        match net {
            Network::Decoder => &self.decoder,
            Network::TransformationMean => &self.transformation_mean,
            Network::TransformationVariance => &self.transformation_variance,
            Network::ContentMean => &self.content_mean,
            Network::ContentScale => &self.content_scale,
        }
    }
}

impl Default for HiddenWidths {
    fn default() -> Self {
        HiddenWidths::uniform(&[128, 128])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub transformation_dim: usize,
    pub content_dim: usize,
    pub hidden: HiddenWidths,
    pub aggregation: AggregationMode,
    pub group_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            data_dim: 256,
            transformation_dim: 3,
            content_dim: 16,
            hidden: HiddenWidths::default(),
            aggregation: AggregationMode::Average,
            group_size: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("transformation_dim", self.transformation_dim),
            ("content_dim", self.content_dim),
            ("group_size", self.group_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.aggregation == AggregationMode::None && self.group_size != 1 {
            return Err(Error::Config(format!(
                "aggregation 'none' requires group_size 1, got {}",
                self.group_size
            )));
        }
        for net in Network::ALL {
            if self.hidden.get(net).contains(&0) {
                return Err(Error::Config(format!(
                    "zero-width hidden layer in {}",
                    net.key()
                )));
            }
        }
        Ok(())
    }

    pub fn scale_convention(&self) -> ScaleConvention {
        match self.aggregation {
            AggregationMode::Product => ScaleConvention::Precision,
            AggregationMode::Average | AggregationMode::None => ScaleConvention::Variance,
        }
    }

    /// Layer sizes from input to output.
    pub fn layer_dims(&self, net: Network) -> Vec<usize> {
        let (input, output) = match net {
            Network::Decoder => (self.transformation_dim + self.content_dim, self.data_dim),
            Network::TransformationMean | Network::TransformationVariance => {
                (self.data_dim, self.transformation_dim)
            }
            Network::ContentMean | Network::ContentScale => (self.data_dim, self.content_dim),
        };
        let mut dims = vec![input];
        dims.extend_from_slice(self.hidden.get(net));
        dims.push(output);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All network weights, in a fixed order: networks as listed in
/// [`Network::ALL`], each layer's weight followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<NamedTensor>,
}

pub fn param_name(net: Network, layer: usize, bias: bool) -> String {
    format!(
        "{}.{layer}.{}",
        net.key(),
        if bias { "bias" } else { "weight" }
    )
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut entries = Vec::new();
        for net in Network::ALL {
            let dims = config.layer_dims(net);
            for (layer, pair) in dims.windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
                let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.sample(dist)).collect();
                entries.push(NamedTensor {
                    name: param_name(net, layer, false),
                    tensor: Tensor::matrix(fan_in, fan_out, w).expect("shape matches"),
                });
                entries.push(NamedTensor {
                    name: param_name(net, layer, true),
                    tensor: Tensor::zeros(vec![fan_out]),
                });
            }
        }
        ModelParams { entries }
    }

    pub fn from_entries(entries: Vec<NamedTensor>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Contract(format!("duplicate parameter {}", e.name)));
            }
            if !e.tensor.is_finite() {
                return Err(Error::Contract(format!(
                    "parameter {} is not finite",
                    e.name
                )));
            }
        }
        Ok(ModelParams { entries })
    }

    /// Checks names and shapes against a configuration.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let mut expected = Vec::new();
        for net in Network::ALL {
            let dims = config.layer_dims(net);
            for (layer, pair) in dims.windows(2).enumerate() {
                expected.push((param_name(net, layer, false), vec![pair[0], pair[1]]));
                expected.push((param_name(net, layer, true), vec![pair[1]]));
            }
        }
        if expected.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), e) in expected.iter().zip(&self.entries) {
            if *name != e.name || shape.as_slice() != e.tensor.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} with shape {:?} does not match expected {name} {shape:?}",
                    e.name,
                    e.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Concatenation of all values, in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Finds the first parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.is_finite())
            .map(|e| e.name.as_str())
    }
}

/// `B` groups of `K` members, stored member-major: rows `g*K .. (g+1)*K`
/// belong to group `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub data: Vec<f64>,
    pub groups: usize,
    pub group_size: usize,
    pub dim: usize,
    /// Class of each group.
    pub labels: Vec<u32>,
    /// Dataset index of each member row.
    pub members: Vec<usize>,
}

impl GroupBatch {
    pub fn from_groups(groups: &[Vec<Vec<f64>>]) -> Result<Self> {
        let k = groups.first().map(|g| g.len()).unwrap_or(0);
        let dim = groups
            .first()
            .and_then(|g| g.first())
            .map(|x| x.len())
            .unwrap_or(0);
        if k == 0 || dim == 0 {
            return Err(Error::Contract("empty group batch".into()));
        }
        let mut data = Vec::with_capacity(groups.len() * k * dim);
        for g in groups {
            if g.len() != k {
                return Err(Error::Contract("groups of unequal size".into()));
            }
            for x in g {
                if x.len() != dim {
                    return Err(Error::Contract("members of unequal dimension".into()));
                }
                data.extend_from_slice(x);
            }
        }
        Ok(GroupBatch {
            data,
            groups: groups.len(),
            group_size: k,
            dim,
            labels: vec![0; groups.len()],
            members: (0..groups.len() * k).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.groups * self.group_size
    }

    pub fn member(&self, group: usize, k: usize) -> &[f64] {
        let r = group * self.group_size + k;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Standard-normal draws for one evaluation of the objective: one
/// transformation draw per member row, one content draw per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub transformation: Vec<f64>,
    pub content: Vec<f64>,
}

impl ElboNoise {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        config: &ModelConfig,
        groups: usize,
        group_size: usize,
    ) -> Self {
        let t = groups * group_size * config.transformation_dim;
        let c = groups * config.content_dim;
        ElboNoise {
            transformation: (0..t).map(|_| rng.sample(StandardNormal)).collect(),
            content: (0..c).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn zeros(config: &ModelConfig, groups: usize, group_size: usize) -> Self {
        ElboNoise {
            transformation: vec![0.0; groups * group_size * config.transformation_dim],
            content: vec![0.0; groups * config.content_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentPosterior {
    pub aggregate: DiagGaussian,
    pub individual: Vec<DiagGaussian>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPosterior {
    pub transformation: Vec<DiagGaussian>,
    pub content: ContentPosterior,
}

/// Scalar pieces of the objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// Mean over groups of the ELBO.
    pub objective: f64,
    pub reconstruction: f64,
    pub transformation_kl: f64,
    pub content_kl: f64,
}

/// Graph nodes produced when the objective is built.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub objective: NodeId,
    pub reconstruction: NodeId,
    pub transformation_kl: NodeId,
    pub content_kl: NodeId,
}

struct ContentRows {
    mean: NodeId,
    variance: NodeId,
    precision: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Model { config, params })
    }

    /// Puts every parameter into `graph`, as trainable leaves or constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    graph.param(e.tensor.clone())
                } else {
                    graph.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    fn network_offset(&self, net: Network) -> usize {
        Network::ALL
            .iter()
            .take_while(|&&n| n != net)
            .map(|&n| 2 * (self.config.layer_dims(n).len() - 1))
            .sum()
    }

    /// Runs one network on a row batch: affine layers, relu between them,
    /// linear top layer.
    pub fn run_network(
        &self,
        graph: &mut Graph,
        ids: &[NodeId],
        net: Network,
        input: NodeId,
    ) -> Result<NodeId> {
        let layers = self.config.layer_dims(net).len() - 1;
        let base = self.network_offset(net);
        let mut h = input;
        for layer in 0..layers {
            h = graph.affine(h, ids[base + 2 * layer], ids[base + 2 * layer + 1])?;
            if layer + 1 < layers {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    pub fn transformation_rows(
        &self,
        graph: &mut Graph,
        ids: &[NodeId],
        x: NodeId,
    ) -> Result<GaussianRows> {
        let mean = self.run_network(graph, ids, Network::TransformationMean, x)?;
        let raw = self.run_network(graph, ids, Network::TransformationVariance, x)?;
        let pos = graph.positivity_map(raw)?;
        let variance = graph.clamp(pos, VARIANCE_FLOOR, f64::INFINITY);
        Ok(GaussianRows { mean, variance })
    }

    fn content_rows(&self, graph: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<ContentRows> {
        let mean = self.run_network(graph, ids, Network::ContentMean, x)?;
        let raw = self.run_network(graph, ids, Network::ContentScale, x)?;
        let pos = graph.positivity_map(raw)?;
        Ok(match self.config.scale_convention() {
            ScaleConvention::Variance => {
                let variance = graph.clamp(pos, VARIANCE_FLOOR, f64::INFINITY);
                let precision = graph.recip(variance);
                ContentRows {
                    mean,
                    variance,
                    precision,
                }
            }
            ScaleConvention::Precision => {
                let precision = graph.clamp(pos, 0.0, 1.0 / VARIANCE_FLOOR);
                let variance = graph.recip(precision);
                ContentRows {
                    mean,
                    variance,
                    precision,
                }
            }
        })
    }

    fn aggregate_rows(
        &self,
        graph: &mut Graph,
        members: &ContentRows,
        group_size: usize,
    ) -> Result<GaussianRows> {
        let rows = GaussianRows {
            mean: members.mean,
            variance: members.variance,
        };
        match self.config.aggregation {
            AggregationMode::Average => gaussian::aggregate_average_rows(graph, rows, group_size),
            AggregationMode::Product => {
                gaussian::aggregate_product_rows(graph, members.mean, members.precision, group_size)
            }
            AggregationMode::None => {
                if group_size != 1 {
                    return Err(Error::Config(format!(
                        "aggregation 'none' with a group of {group_size} members"
                    )));
                }
                Ok(rows)
            }
        }
    }

    fn input_rows(&self, graph: &mut Graph, data: &[f64]) -> Result<NodeId> {
        let d = self.config.data_dim;
        if data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(Error::Contract(format!(
                "input of {} values is not a whole number of {d}-dimensional rows",
                data.len()
            )));
        }
        Ok(graph.constant(Tensor::matrix(data.len() / d, d, data.to_vec())?))
    }

    /// Builds the batch objective (mean over groups of the ELBO) in `graph`.
    pub fn build_objective(
        &self,
        graph: &mut Graph,
        ids: &[NodeId],
        batch: &GroupBatch,
        noise: &ElboNoise,
    ) -> Result<ObjectiveNodes> {
        let cfg = &self.config;
        if batch.dim != cfg.data_dim {
            return Err(Error::Contract(format!(
                "batch dimension {} does not match model data_dim {}",
                batch.dim, cfg.data_dim
            )));
        }
        let (b, k, l, m) = (
            batch.groups,
            batch.group_size,
            cfg.transformation_dim,
            cfg.content_dim,
        );
        if noise.transformation.len() != b * k * l || noise.content.len() != b * m {
            return Err(Error::Contract(format!(
                "noise draws ({}, {}) do not match {b} groups of {k} with L={l}, M={m}",
                noise.transformation.len(),
                noise.content.len()
            )));
        }
        let x = self.input_rows(graph, &batch.data)?;
        let yq = self.transformation_rows(graph, ids, x)?;
        let members = self.content_rows(graph, ids, x)?;
        let zq = self.aggregate_rows(graph, &members, k)?;

        let y = gaussian::reparam_rows(
            graph,
            yq,
            Tensor::matrix(b * k, l, noise.transformation.clone())?,
        )?;
        let z = gaussian::reparam_rows(graph, zq, Tensor::matrix(b, m, noise.content.clone())?)?;
        let z_shared = graph.repeat_rows(z, k)?;
        let latent = graph.concat_cols(y, z_shared)?;
        let x_hat = self.run_network(graph, ids, Network::Decoder, latent)?;

        let reconstruction = gaussian::recon_log_density_sum(graph, x, x_hat)?;
        let transformation_kl = gaussian::kl_to_standard_sum(graph, yq)?;
        let content_kl = gaussian::kl_to_standard_sum(graph, zq)?;
        let total = graph.sub(reconstruction, transformation_kl)?;
        let total = graph.sub(total, content_kl)?;
        let objective = graph.scale(total, 1.0 / b as f64);
        Ok(ObjectiveNodes {
            objective,
            reconstruction,
            transformation_kl,
            content_kl,
        })
    }

    pub fn objective_terms(&self, batch: &GroupBatch, noise: &ElboNoise) -> Result<ObjectiveTerms> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let nodes = self.build_objective(&mut graph, &ids, batch, noise)?;
        let v = |id| graph.value(id).item();
        Ok(ObjectiveTerms {
            objective: v(nodes.objective)?,
            reconstruction: v(nodes.reconstruction)?,
            transformation_kl: v(nodes.transformation_kl)?,
            content_kl: v(nodes.content_kl)?,
        })
    }

    /// Mean ELBO over the groups of `batch`.
    pub fn batch_objective(&self, batch: &GroupBatch, noise: &ElboNoise) -> Result<f64> {
        Ok(self.objective_terms(batch, noise)?.objective)
    }

    /// ELBO of a single group with the given noise draws.
    pub fn elbo(&self, group: &[&[f64]], noise: &ElboNoise) -> Result<f64> {
        let rows: Vec<Vec<f64>> = group.iter().map(|x| x.to_vec()).collect();
        let batch = GroupBatch::from_groups(&[rows])?;
        self.batch_objective(&batch, noise)
    }

    /// Objective value and its gradient with respect to every parameter.
    /// Returns the graph as well so callers can inspect non-finite nodes.
    pub fn objective_with_gradients(
        &self,
        batch: &GroupBatch,
        noise: &ElboNoise,
    ) -> Result<(f64, Vec<Vec<f64>>, Graph)> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, true);
        let nodes = self.build_objective(&mut graph, &ids, batch, noise)?;
        let value = graph.value(nodes.objective).item()?;
        graph.backward(nodes.objective)?;
        let grads = ids
            .iter()
            .map(|&id| graph.grad(id).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        Ok((value, grads, graph))
    }

    /// Transformation posteriors for each row of `xs` (row-major, `D` per row).
    pub fn encode_transformation_batch(&self, xs: &[f64]) -> Result<Vec<DiagGaussian>> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let x = self.input_rows(&mut graph, xs)?;
        Ok(self.transformation_rows(&mut graph, &ids, x)?.rows(&graph))
    }

    pub fn encode_transformation(&self, x: &[f64]) -> Result<DiagGaussian> {
        Ok(self.encode_transformation_batch(x)?.remove(0))
    }

    /// Single-image content posteriors for each row of `xs`.
    pub fn encode_content_batch(&self, xs: &[f64]) -> Result<Vec<DiagGaussian>> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let x = self.input_rows(&mut graph, xs)?;
        let c = self.content_rows(&mut graph, &ids, x)?;
        Ok(GaussianRows {
            mean: c.mean,
            variance: c.variance,
        }
        .rows(&graph))
    }

    /// Raw positive output of the content scale network for each row, i.e.
    /// a variance or a precision depending on [`ScaleConvention`].
    pub fn content_precisions(&self, xs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let x = self.input_rows(&mut graph, xs)?;
        let c = self.content_rows(&mut graph, &ids, x)?;
        let m = self.config.content_dim;
        Ok(graph
            .value(c.precision)
            .data()
            .chunks(m)
            .map(|r| r.to_vec())
            .collect())
    }

    /// Content means `h(x)` for each row, flattened row-major.
    pub fn content_means(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let x = self.input_rows(&mut graph, xs)?;
        let h = self.run_network(&mut graph, &ids, Network::ContentMean, x)?;
        Ok(graph.value(h).data().to_vec())
    }

    /// Transformation means `g(x)` for each row, flattened row-major.
    pub fn transformation_means(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let x = self.input_rows(&mut graph, xs)?;
        let g = self.run_network(&mut graph, &ids, Network::TransformationMean, x)?;
        Ok(graph.value(g).data().to_vec())
    }

    pub fn encode_content_group(
        &self,
        group: &[&[f64]],
        mode: AggregationMode,
    ) -> Result<ContentPosterior> {
        if group.is_empty() {
            return Err(Error::Contract("empty group".into()));
        }
        if mode == AggregationMode::None && group.len() > 1 {
            return Err(Error::Config(format!(
                "aggregation 'none' with a group of {} members",
                group.len()
            )));
        }
        let flat: Vec<f64> = group.iter().flat_map(|x| x.iter().copied()).collect();
        let individual = self.encode_content_batch(&flat)?;
        let aggregate = match mode {
            AggregationMode::Average => gaussian::aggregate_average(&individual)?,
            AggregationMode::Product => gaussian::aggregate_product(&individual)?,
            AggregationMode::None => individual[0].clone(),
        };
        Ok(ContentPosterior {
            aggregate,
            individual,
        })
    }

    pub fn encode_group(&self, group: &[&[f64]]) -> Result<GroupPosterior> {
        let content = self.encode_content_group(group, self.config.aggregation)?;
        let flat: Vec<f64> = group.iter().flat_map(|x| x.iter().copied()).collect();
        Ok(GroupPosterior {
            transformation: self.encode_transformation_batch(&flat)?,
            content,
        })
    }

    /// Decoder means for row batches of transformations `ys` and contents `zs`.
    pub fn decode_batch(&self, ys: &[f64], zs: &[f64]) -> Result<Vec<f64>> {
        let (l, m) = (self.config.transformation_dim, self.config.content_dim);
        if !ys.len().is_multiple_of(l)
            || !zs.len().is_multiple_of(m)
            || ys.len() / l != zs.len() / m
            || ys.is_empty()
        {
            return Err(Error::Contract(format!(
                "decode expects matching row batches of {l} and {m} values"
            )));
        }
        let rows = ys.len() / l;
        let mut graph = Graph::new();
        let ids = self.bind(&mut graph, false);
        let y = graph.constant(Tensor::matrix(rows, l, ys.to_vec())?);
        let z = graph.constant(Tensor::matrix(rows, m, zs.to_vec())?);
        let latent = graph.concat_cols(y, z)?;
        let out = self.run_network(&mut graph, &ids, Network::Decoder, latent)?;
        Ok(graph.value(out).data().to_vec())
    }

    pub fn decode(&self, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.decode_batch(y, z)
    }

    /// Decoder output at the posterior means of each row of `xs`.
    pub fn reconstruct(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let y = self.transformation_means(xs)?;
        let z = self.content_means(xs)?;
        self.decode_batch(&y, &z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config(mode: AggregationMode, k: usize) -> ModelConfig {
        ModelConfig {
            data_dim: 6,
            transformation_dim: 2,
            content_dim: 3,
            hidden: HiddenWidths::uniform(&[8]),
            aggregation: mode,
            group_size: k,
        }
    }

    fn toy_model(mode: AggregationMode, k: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::init(toy_config(mode, k), &mut rng).unwrap();
        // non-zero biases so relu kinks and constant paths are exercised
        for t in model.params.tensors_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        model
    }

    fn toy_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }

    fn zero_final_layer(model: &mut Model, net: Network, bias: f64) {
        let last = model.config.layer_dims(net).len() - 2;
        let w = model.params.get_mut(&param_name(net, last, false)).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = model.params.get_mut(&param_name(net, last, true)).unwrap();
        b.data_mut().iter_mut().for_each(|v| *v = bias);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig {
            aggregation: AggregationMode::None,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.group_size = 1;
        assert!(c.validate().is_ok());
        c.content_dim = 0;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().transformation_dim, 3);
    }

    #[test]
    fn init_is_glorot_with_zero_bias_and_deterministic() {
        let cfg = toy_config(AggregationMode::Average, 2);
        let a = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        a.check_against(&cfg).unwrap();
        for e in a.entries() {
            if e.name.ends_with("bias") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            } else {
                let s = e.tensor.shape();
                let limit = (6.0 / (s[0] + s[1]) as f64).sqrt();
                assert!(e.tensor.data().iter().all(|v| v.abs() <= limit));
            }
        }
        assert_eq!(a.get("decoder.0.weight").unwrap().shape(), &[5, 8]);
        assert_eq!(a.get("content_scale.1.weight").unwrap().shape(), &[8, 3]);
    }

    #[test]
    fn constant_transformation_encoder() {
        let mut model = toy_model(AggregationMode::Average, 1, 3);
        zero_final_layer(&mut model, Network::TransformationMean, 0.4);
        zero_final_layer(&mut model, Network::TransformationVariance, -0.6);
        let q = model
            .encode_transformation(&[0.1, 0.5, 0.2, 0.9, 0.0, 0.3])
            .unwrap();
        assert_eq!(q.dim(), 2);
        assert_eq!(q.mean(), &[0.4, 0.4]);
        assert!(q
            .variance()
            .iter()
            .all(|v| (v - (-0.3f64).exp()).abs() < 1e-15));
    }

    #[test]
    fn transformation_mean_gradient_matches_fd() {
        let model = toy_model(AggregationMode::Average, 1, 4);
        let x = vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.5];
        let name = "transformation_mean.0.weight";
        let f = |w: &Tensor| {
            let mut m = model.clone();
            *m.params.get_mut(name).unwrap() = w.clone();
            m.encode_transformation(&x)
                .unwrap()
                .mean()
                .iter()
                .sum::<f64>()
        };
        let mut graph = Graph::new();
        let ids = model.bind(&mut graph, true);
        let xi = graph.constant(Tensor::matrix(1, 6, x.clone()).unwrap());
        let q = model.transformation_rows(&mut graph, &ids, xi).unwrap();
        let s = graph.sum(q.mean);
        graph.backward(s).unwrap();
        let idx = model
            .params
            .entries()
            .iter()
            .position(|e| e.name == name)
            .unwrap();
        let fd = fd_gradient(f, model.params.get(name).unwrap(), 1e-5);
        let an = graph.grad(ids[idx]).unwrap();
        for (a, b) in an.iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn content_group_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = toy_inputs(&mut rng, 3, 6);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        for mode in [AggregationMode::Average, AggregationMode::Product] {
            let model = toy_model(mode, 3, 6);
            let post = model.encode_content_group(&refs[..1], mode).unwrap();
            let (a, b) = (&post.aggregate, &post.individual[0]);
            for (x, y) in a
                .mean()
                .iter()
                .zip(b.mean())
                .chain(a.variance().iter().zip(b.variance()))
            {
                assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
        let model = toy_model(AggregationMode::None, 1, 6);
        assert!(model
            .encode_content_group(&refs[..1], AggregationMode::None)
            .is_ok());
        assert!(matches!(
            model.encode_content_group(&refs, AggregationMode::None),
            Err(Error::Config(_))
        ));

        let mut model = toy_model(AggregationMode::Average, 3, 7);
        zero_final_layer(&mut model, Network::ContentMean, 0.25);
        let post = model
            .encode_content_group(&refs, AggregationMode::Average)
            .unwrap();
        assert!(post
            .aggregate
            .mean()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn product_mode_follows_the_precise_member() {
        // content mean reads input 0, content precision grows with input 1
        let mut model = toy_model(AggregationMode::Product, 2, 8);
        zero_final_layer(&mut model, Network::ContentMean, 0.0);
        zero_final_layer(&mut model, Network::ContentScale, 0.0);
        let h = model.config.hidden.content_mean[0];
        {
            let w0 = model.params.get_mut("content_mean.0.weight").unwrap();
            w0.data_mut().iter_mut().for_each(|v| *v = 0.0);
            w0.data_mut()[0] = 1.0; // input 0 -> hidden 0
            let w1 = model.params.get_mut("content_mean.1.weight").unwrap();
            for j in 0..3 {
                w1.data_mut()[j] = 1.0; // hidden 0 -> every output
            }
            model
                .params
                .get_mut("content_mean.0.bias")
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        {
            let w0 = model.params.get_mut("content_scale.0.weight").unwrap();
            w0.data_mut().iter_mut().for_each(|v| *v = 0.0);
            w0.data_mut()[h] = 1.0; // input 1 -> hidden 0
            let w1 = model.params.get_mut("content_scale.1.weight").unwrap();
            for j in 0..3 {
                w1.data_mut()[j] = 20.0;
            }
            model
                .params
                .get_mut("content_scale.0.bias")
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let a = vec![0.2, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = vec![0.9, 0.8, 0.0, 0.0, 0.0, 0.0];
        let post = model
            .encode_content_group(&[&a, &b], AggregationMode::Product)
            .unwrap();
        // precisions: exp(0) = 1 vs exp(20*0.8/2) = e^8
        let pa = 1.0;
        let pb = (8.0f64).exp();
        let expected = crate::gaussian::aggregate_product(&[
            DiagGaussian::new(vec![0.2; 3], vec![1.0 / pa; 3]).unwrap(),
            DiagGaussian::new(vec![0.9; 3], vec![1.0 / pb; 3]).unwrap(),
        ])
        .unwrap();
        for i in 0..3 {
            assert!((post.aggregate.mean()[i] - expected.mean()[i]).abs() < 1e-12);
            assert!((post.aggregate.mean()[i] - 0.9).abs() < 1e-3);
        }
    }

    #[test]
    fn decode_shape_determinism_and_gradient() {
        let model = toy_model(AggregationMode::Average, 1, 10);
        let y = [0.3, -0.2];
        let z = [0.5, 1.0, -0.7];
        let a = model.decode(&y, &z).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, model.decode(&y, &z).unwrap());
        assert!(model.decode(&y, &z[..2]).is_err());

        let mut graph = Graph::new();
        let ids = model.bind(&mut graph, false);
        let yi = graph.constant(Tensor::matrix(1, 2, y.to_vec()).unwrap());
        let zi = graph.param(Tensor::matrix(1, 3, z.to_vec()).unwrap());
        let lat = graph.concat_cols(yi, zi).unwrap();
        let out = model
            .run_network(&mut graph, &ids, Network::Decoder, lat)
            .unwrap();
        let sq = graph.square(out);
        let s = graph.sum(sq);
        graph.backward(s).unwrap();
        let fd = fd_gradient(
            |t| {
                model
                    .decode(&y, t.data())
                    .unwrap()
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &Tensor::vector(z.to_vec()),
            1e-5,
        );
        for (a, b) in graph.grad(zi).unwrap().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    /// Step-by-step ELBO for one member with D=2, L=1, M=1 and one hidden
    /// unit per network, computed without the graph.
    #[test]
    fn elbo_matches_scripted_arithmetic() {
        let cfg = ModelConfig {
            data_dim: 2,
            transformation_dim: 1,
            content_dim: 1,
            hidden: HiddenWidths::uniform(&[1]),
            aggregation: AggregationMode::Average,
            group_size: 1,
        };
        let mut model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let set = |m: &mut Model, name: &str, vals: &[f64]| {
            m.params
                .get_mut(name)
                .unwrap()
                .data_mut()
                .copy_from_slice(vals);
        };
        // encoders: hidden = relu(a·x + c), out = u·hidden + v
        set(&mut model, "transformation_mean.0.weight", &[0.5, -0.25]);
        set(&mut model, "transformation_mean.0.bias", &[0.1]);
        set(&mut model, "transformation_mean.1.weight", &[2.0]);
        set(&mut model, "transformation_mean.1.bias", &[-0.3]);
        set(&mut model, "transformation_variance.0.weight", &[1.0, 1.0]);
        set(&mut model, "transformation_variance.0.bias", &[0.0]);
        set(&mut model, "transformation_variance.1.weight", &[-1.0]);
        set(&mut model, "transformation_variance.1.bias", &[0.2]);
        set(&mut model, "content_mean.0.weight", &[0.3, 0.7]);
        set(&mut model, "content_mean.0.bias", &[0.0]);
        set(&mut model, "content_mean.1.weight", &[1.5]);
        set(&mut model, "content_mean.1.bias", &[0.05]);
        set(&mut model, "content_scale.0.weight", &[-0.4, 0.9]);
        set(&mut model, "content_scale.0.bias", &[0.1]);
        set(&mut model, "content_scale.1.weight", &[0.8]);
        set(&mut model, "content_scale.1.bias", &[-0.5]);
        // decoder: latent [y, z] -> hidden (1) -> 2 outputs
        set(&mut model, "decoder.0.weight", &[1.0, 0.5]);
        set(&mut model, "decoder.0.bias", &[0.2]);
        set(&mut model, "decoder.1.weight", &[0.6, -0.4]);
        set(&mut model, "decoder.1.bias", &[0.1, 0.3]);

        let x = [0.8, 0.4];
        let (ey, ez) = (0.7, -1.2);
        let relu = |v: f64| v.max(0.0);
        let ym = 2.0 * relu(0.5 * 0.8 - 0.25 * 0.4 + 0.1) - 0.3; // 0.5
        let yv = ((-relu(0.8 + 0.4) + 0.2) / 2.0).exp(); // exp(-0.5)
        let zm = 1.5 * relu(0.3 * 0.8 + 0.7 * 0.4) + 0.05; // 0.83
        let zv = ((0.8 * relu(-0.4 * 0.8 + 0.9 * 0.4 + 0.1) - 0.5) / 2.0).exp();
        let y = ym + yv.sqrt() * ey;
        let z = zm + zv.sqrt() * ez;
        let hid = relu(y + 0.5 * z + 0.2);
        let xh = [0.6 * hid + 0.1, -0.4 * hid + 0.3];
        let recon = -0.5 * ((x[0] - xh[0]).powi(2) + (x[1] - xh[1]).powi(2))
            - (2.0 * std::f64::consts::PI).ln();
        let kl = |m: f64, v: f64| 0.5 * (m * m + v - v.ln() - 1.0);
        let expected = recon - kl(ym, yv) - kl(zm, zv);

        let noise = ElboNoise {
            transformation: vec![ey],
            content: vec![ez],
        };
        let got = model.elbo(&[&x], &noise).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn elbo_is_reconstruction_when_posteriors_are_priors() {
        let mut model = toy_model(AggregationMode::Average, 2, 12);
        zero_final_layer(&mut model, Network::TransformationMean, 0.0);
        zero_final_layer(&mut model, Network::TransformationVariance, 0.0);
        zero_final_layer(&mut model, Network::ContentMean, 0.0);
        zero_final_layer(&mut model, Network::ContentScale, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs = toy_inputs(&mut rng, 2, 6);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let noise = ElboNoise::sample(&mut rng, &model.config, 1, 2);
        let batch = GroupBatch::from_groups(std::slice::from_ref(&xs)).unwrap();
        let terms = model.objective_terms(&batch, &noise).unwrap();
        assert_eq!(terms.transformation_kl, 0.0);
        assert_eq!(terms.content_kl, 0.0);
        assert_eq!(model.elbo(&refs, &noise).unwrap(), terms.reconstruction);
    }

    #[test]
    fn batch_objective_is_mean_of_group_elbos() {
        let model = toy_model(AggregationMode::Product, 3, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let groups: Vec<Vec<Vec<f64>>> = (0..4).map(|_| toy_inputs(&mut rng, 3, 6)).collect();
        let batch = GroupBatch::from_groups(&groups).unwrap();
        let noise = ElboNoise::sample(&mut rng, &model.config, 4, 3);
        let total = model.batch_objective(&batch, &noise).unwrap();
        let (l, m) = (2, 3);
        let mut sum = 0.0;
        for (gi, g) in groups.iter().enumerate() {
            let refs: Vec<&[f64]> = g.iter().map(|x| x.as_slice()).collect();
            let n = ElboNoise {
                transformation: noise.transformation[gi * 3 * l..(gi + 1) * 3 * l].to_vec(),
                content: noise.content[gi * m..(gi + 1) * m].to_vec(),
            };
            sum += model.elbo(&refs, &n).unwrap();
        }
        assert!((total - sum / 4.0).abs() < 1e-12);

        let single = GroupBatch::from_groups(&groups[..1]).unwrap();
        let n1 = ElboNoise {
            transformation: noise.transformation[..3 * l].to_vec(),
            content: noise.content[..m].to_vec(),
        };
        let v1 = model.batch_objective(&single, &n1).unwrap();
        let dup = GroupBatch::from_groups(&[groups[0].clone(), groups[0].clone()]).unwrap();
        let n2 = ElboNoise {
            transformation: [n1.transformation.clone(), n1.transformation.clone()].concat(),
            content: [n1.content.clone(), n1.content.clone()].concat(),
        };
        assert!((model.batch_objective(&dup, &n2).unwrap() - v1).abs() < 1e-12);
    }

    #[test]
    fn shared_content_reaches_every_member() {
        let model = toy_model(AggregationMode::Average, 3, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs = toy_inputs(&mut rng, 3, 6);
        let post = model
            .encode_content_group(
                &xs.iter().map(|x| x.as_slice()).collect::<Vec<_>>(),
                AggregationMode::Average,
            )
            .unwrap();
        let ys: Vec<f64> = model.transformation_means(&xs.concat()).unwrap();
        let z = post.aggregate.mean().to_vec();
        let zs = [z.clone(), z.clone(), z.clone()].concat();
        let base = model.decode_batch(&ys, &zs).unwrap();
        let mut z2 = z.clone();
        z2[0] += 0.5;
        let zs2 = [z2.clone(), z2.clone(), z2].concat();
        let moved = model.decode_batch(&ys, &zs2).unwrap();
        for k in 0..3 {
            assert_ne!(base[k * 6..(k + 1) * 6], moved[k * 6..(k + 1) * 6]);
        }
        let mut ys2 = ys.clone();
        ys2[2] += 0.5; // member 1's first coordinate
        let moved = model.decode_batch(&ys2, &zs).unwrap();
        assert_eq!(base[..6], moved[..6]);
        assert_ne!(base[6..12], moved[6..12]);
        assert_eq!(base[12..], moved[12..]);
    }

    #[test]
    fn variances_respect_floor() {
        let mut model = toy_model(AggregationMode::Product, 2, 18);
        zero_final_layer(&mut model, Network::ContentScale, 60.0);
        zero_final_layer(&mut model, Network::TransformationVariance, -60.0);
        let x = vec![0.5; 6];
        for q in model.encode_content_batch(&x).unwrap() {
            assert!(q.variance().iter().all(|&v| v >= VARIANCE_FLOOR));
        }
        let q = model.encode_transformation(&x).unwrap();
        assert!(q.variance().iter().all(|&v| v >= VARIANCE_FLOOR));
        let post = model
            .encode_content_group(&[&x, &x], AggregationMode::Product)
            .unwrap();
        assert!(post
            .aggregate
            .variance()
            .iter()
            .all(|&v| v >= VARIANCE_FLOOR));
    }

    use rand::Rng;
}
