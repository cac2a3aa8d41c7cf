//! Checkpoints: a JSON header line followed by one JSON line per tensor.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_schema, Grid};
use crate::nn::{Activation, DenseNet, Layer};

use super::{build_adjacency, DegreeCount, EdgeAdjacency, GnnConfig, GnnParams, NeighborRule};

pub const GNN_SCHEMA: &str = "gridcascade.gnn";
const GNN_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    grid_id: String,
    #[serde(rename = "L")]
    hidden: usize,
    #[serde(rename = "K")]
    steps: usize,
    #[serde(rename = "T")]
    horizon: u32,
    neighbor_rule: NeighborRule,
    degree_count: DegreeCount,
    input_scale: f64,
    buses: usize,
    edges: usize,
    edge_coefficients: usize,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorLine {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GnnParams {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let named = self.named_tensors();
        let header = Header {
            schema: format!("{GNN_SCHEMA}/{GNN_SCHEMA_VERSION}"),
            grid_id: self.grid_id.clone(),
            hidden: self.config.hidden,
            steps: self.config.steps,
            horizon: self.config.horizon,
            neighbor_rule: self.config.neighbor_rule,
            degree_count: self.config.degree_count,
            input_scale: self.config.input_scale,
            buses: self.num_buses,
            edges: self.num_edges,
            edge_coefficients: self.attn_edge_edge.output_width(),
            tensors: named.len(),
        };
        let io = |e| Error::io("<checkpoint>", e);
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for (net_name, net) in self.nets() {
            for (i, layer) in net.layers().iter().enumerate() {
                for (kind, data, shape) in [
                    ("weight", &layer.weight, vec![layer.outputs, layer.inputs]),
                    ("bias", &layer.bias, vec![layer.outputs]),
                ] {
                    let line = TensorLine {
                        name: format!("{net_name}.{i}.{kind}"),
                        shape,
                        data: data.clone(),
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n").map_err(io)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, naming the first missing or malformed tensor.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or(Error::Empty("checkpoint"))?
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let value: serde_json::Value = serde_json::from_str(&header_line)
            .map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
        let schema = value
            .get("schema")
            .and_then(|s| s.as_str())
            .ok_or_else(|| Error::Schema("checkpoint header lacks \"schema\"".into()))?;
        check_schema(schema, GNN_SCHEMA, GNN_SCHEMA_VERSION)?;
        let h: Header = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;

        let config = GnnConfig {
            hidden: h.hidden,
            steps: h.steps,
            horizon: h.horizon,
            neighbor_rule: h.neighbor_rule,
            degree_count: h.degree_count,
            input_scale: h.input_scale,
        };
        let (l, ne) = (h.hidden, h.edges);
        let mut specs: Vec<(String, Vec<usize>)> = vec![
            ("h_initial".into(), vec![1, l, l]),
            ("attn_edge_edge".into(), vec![ne, 2 * ne, h.edge_coefficients]),
            ("attn_node_edge".into(), vec![ne, 2 * ne, 2 * ne]),
        ];
        for k in 1..=h.steps {
            specs.push((format!("h_edge_edge.{k}"), vec![l, l, l]));
            specs.push((format!("h_node_edge.{k}"), vec![l, l, l]));
        }
        specs.push(("h_final".into(), vec![l, l, config.classes()]));

        let mut next_tensor = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let missing = || Error::Schema(format!("checkpoint is missing tensor {name}"));
            let line = lines.next().ok_or_else(missing)?.map_err(|_| missing())?;
            let t: TensorLine = serde_json::from_str(&line)
                .map_err(|e| Error::Schema(format!("tensor {name} is truncated or malformed: {e}")))?;
            if t.name != name || t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Schema(format!(
                    "expected tensor {name} with shape {shape:?}, found {} with shape {:?}",
                    t.name, t.shape
                )));
            }
            Ok(t.data)
        };
        let mut nets = Vec::with_capacity(specs.len());
        for (name, widths) in &specs {
            let n_layers = widths.len() - 1;
            let mut layers = Vec::with_capacity(n_layers);
            for i in 0..n_layers {
                let (inputs, outputs) = (widths[i], widths[i + 1]);
                let weight = next_tensor(&format!("{name}.{i}.weight"), &[outputs, inputs])?;
                let bias = next_tensor(&format!("{name}.{i}.bias"), &[outputs])?;
                layers.push(Layer {
                    inputs,
                    outputs,
                    weight,
                    bias,
                    activation: if i + 1 == n_layers { Activation::Identity } else { Activation::Relu },
                });
            }
            nets.push(DenseNet::from_layers(layers)?);
        }
        let mut nets = nets.into_iter();
        let mut take = || nets.next().expect("one net per layout entry");
        let h_initial = take();
        let attn_edge_edge = take();
        let attn_node_edge = take();
        let mut h_edge_edge = Vec::with_capacity(h.steps);
        let mut h_node_edge = Vec::with_capacity(h.steps);
        for _ in 0..h.steps {
            h_edge_edge.push(take());
            h_node_edge.push(take());
        }
        let h_final = take();
        Ok(GnnParams {
            grid_id: h.grid_id,
            config,
            num_buses: h.buses,
            num_edges: ne,
            h_initial,
            attn_edge_edge,
            attn_node_edge,
            h_edge_edge,
            h_node_edge,
            h_final,
        })
    }

    /// Loads a checkpoint for `grid` together with the adjacency it was
    /// trained with.
    pub fn load(path: impl AsRef<Path>, grid: &Grid) -> Result<(Self, EdgeAdjacency)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let params = Self::read_from(BufReader::new(file))?;
        let adj = build_adjacency(grid, params.config.neighbor_rule);
        params.check_compatible(grid, &adj)?;
        Ok((params, adj))
    }
}
