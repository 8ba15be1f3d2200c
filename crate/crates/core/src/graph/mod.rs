//! Directed acyclic graphs of blocks with backpropagation.
//!
//! A [`Graph`] is a list of variables and layers. Each layer reads some
//! variables and writes others; each variable has at most one producer and
//! parameters have none. [`Graph::forward`] evaluates the layers in
//! topological order and records the values on a [`Tape`];
//! [`Graph::backward`] runs the backward modes in reverse order,
//! accumulating the derivative of every variable.

mod block;
mod exec;
mod gradcheck;
mod manifest;
mod reverse;
mod table;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub use block::{backward, forward, BnormConfig, CustomBlock, LayerKind, Mode};
pub use exec::{Bindings, ForwardOptions, Tape};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, VariableCheck};
pub use manifest::{GraphSpec, LayerSpec, VariableSpec};
pub use reverse::ReversedGraph;
pub use table::LayerGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Data bound per evaluation, such as images.
    Input,
    /// Learned weights.
    Param,
    /// Ground truth bound per evaluation.
    Label,
    /// Bound like a parameter but never learned, such as running moments.
    State,
    /// Computed by a layer.
    Derived,
}

impl Role {
    /// Roles whose values are supplied by the caller.
    pub fn is_bound(self) -> bool {
        self != Role::Derived
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub role: Role,
    /// For inputs and labels the batch dimension is not checked.
    pub shape: Option<Shape>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// A validated, topologically ordered graph.
#[derive(Clone, Debug)]
pub struct Graph {
    variables: Vec<Variable>,
    layers: Vec<Layer>,
    index: HashMap<String, usize>,
    layer_index: HashMap<String, usize>,
    /// Variable indices per layer.
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
    producer: Vec<Option<usize>>,
    consumers: Vec<Vec<usize>>,
    schedule: Vec<usize>,
    var_order: Vec<usize>,
}

/// Collects variables and layers; [`GraphBuilder::build`] validates them.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    variables: Vec<Variable>,
    layers: Vec<Layer>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variable(&mut self, name: &str, role: Role, shape: Option<Shape>) -> &mut Self {
        self.variables.push(Variable {
            name: name.to_string(),
            role,
            shape,
        });
        self
    }

    pub fn input(&mut self, name: &str) -> &mut Self {
        self.variable(name, Role::Input, None)
    }

    pub fn param(&mut self, name: &str, shape: Shape) -> &mut Self {
        self.variable(name, Role::Param, Some(shape))
    }

    pub fn label(&mut self, name: &str) -> &mut Self {
        self.variable(name, Role::Label, None)
    }

    pub fn state(&mut self, name: &str, shape: Shape) -> &mut Self {
        self.variable(name, Role::State, Some(shape))
    }

    /// Adds a layer. Outputs that were not declared become derived variables.
    pub fn layer(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: &[&str],
        outputs: &[&str],
    ) -> &mut Self {
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn build(&self) -> Result<Graph> {
        Graph::new(self.variables.clone(), self.layers.clone())
    }
}

impl Graph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::new()
    }

    /// Validates variables and layers and computes the evaluation order.
    pub fn new(mut variables: Vec<Variable>, layers: Vec<Layer>) -> Result<Graph> {
        let mut index = HashMap::new();
        for (i, v) in variables.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(Error::Graph(format!(
                    "variable `{}` is declared twice",
                    v.name
                )));
            }
        }
        let mut layer_index = HashMap::new();
        for (l, layer) in layers.iter().enumerate() {
            if layer_index.insert(layer.name.clone(), l).is_some() {
                return Err(Error::Graph(format!(
                    "layer `{}` is declared twice",
                    layer.name
                )));
            }
            layer
                .kind
                .check_arity(layer.inputs.len(), layer.outputs.len())
                .map_err(|e| e.in_layer(&layer.name))?;
            for out in &layer.outputs {
                if !index.contains_key(out) {
                    index.insert(out.clone(), variables.len());
                    variables.push(Variable {
                        name: out.clone(),
                        role: Role::Derived,
                        shape: None,
                    });
                }
            }
        }

        let mut producer: Vec<Option<usize>> = vec![None; variables.len()];
        let mut consumers = vec![Vec::new(); variables.len()];
        let mut ins = Vec::with_capacity(layers.len());
        let mut outs = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let mut o = Vec::new();
            for name in &layer.outputs {
                let v = index[name];
                let var = &variables[v];
                if var.role != Role::Derived {
                    return Err(Error::Graph(format!(
                        "layer `{}` writes `{name}`, which is a {:?} variable",
                        layer.name, var.role
                    )));
                }
                if let Some(p) = producer[v] {
                    return Err(Error::Graph(format!(
                        "variable `{name}` is produced by both `{}` and `{}`",
                        layers[p].name, layer.name
                    )));
                }
                if o.contains(&v) {
                    return Err(Error::Graph(format!(
                        "layer `{}` writes `{name}` twice",
                        layer.name
                    )));
                }
                producer[v] = Some(l);
                o.push(v);
            }
            let mut i = Vec::new();
            for name in &layer.inputs {
                let v = *index.get(name).ok_or_else(|| {
                    Error::Graph(format!(
                        "layer `{}` reads undeclared variable `{name}`",
                        layer.name
                    ))
                })?;
                consumers[v].push(l);
                i.push(v);
            }
            ins.push(i);
            outs.push(o);
        }
        for (v, var) in variables.iter().enumerate() {
            if var.role == Role::Derived && producer[v].is_none() {
                return Err(Error::Graph(format!(
                    "derived variable `{}` has no producer",
                    var.name
                )));
            }
        }

        let mut g = Graph {
            variables,
            layers,
            index,
            layer_index,
            ins,
            outs,
            producer,
            consumers,
            schedule: Vec::new(),
            var_order: Vec::new(),
        };
        g.toposort()?;
        Ok(g)
    }

    /// Kahn's algorithm, always releasing the earliest declared ready layer.
    fn toposort(&mut self) -> Result<()> {
        let nl = self.layers.len();
        let nv = self.variables.len();
        let mut missing: Vec<usize> = (0..nl)
            .map(|l| {
                self.ins[l]
                    .iter()
                    .filter(|&&v| self.producer[v].is_some())
                    .count()
            })
            .collect();
        let mut done = vec![false; nl];
        let mut placed = vec![false; nv];
        let mut schedule = Vec::with_capacity(nl);
        let mut var_order = Vec::with_capacity(nv);
        while schedule.len() < nl {
            let Some(l) = (0..nl).find(|&l| !done[l] && missing[l] == 0) else {
                let stuck: Vec<&str> = (0..nl)
                    .filter(|&l| !done[l])
                    .map(|l| self.layers[l].name.as_str())
                    .collect();
                return Err(Error::Graph(format!(
                    "the graph has a cycle through layers {stuck:?}"
                )));
            };
            done[l] = true;
            schedule.push(l);
            for &v in self.ins[l].iter().chain(&self.outs[l]) {
                if !placed[v] {
                    placed[v] = true;
                    var_order.push(v);
                }
            }
            for &v in &self.outs[l] {
                for &c in &self.consumers[v] {
                    missing[c] -= 1;
                }
            }
        }
        var_order.extend((0..nv).filter(|&v| !placed[v]));
        self.schedule = schedule;
        self.var_order = var_order;
        Ok(())
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.index.get(name).map(|&i| &self.variables[i])
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layer_index.get(name).map(|&i| &self.layers[i])
    }

    pub(crate) fn var_id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unknown variable `{name}`")))
    }

    /// Variable names in topological order, layer inputs before outputs.
    pub fn toposort_variables(&self) -> Vec<&str> {
        self.var_order
            .iter()
            .map(|&v| self.variables[v].name.as_str())
            .collect()
    }

    /// Layer names in evaluation order.
    pub fn schedule(&self) -> Vec<&str> {
        self.schedule
            .iter()
            .map(|&l| self.layers[l].name.as_str())
            .collect()
    }

    /// Variables read by no layer.
    pub fn sinks(&self) -> Vec<&str> {
        self.var_order
            .iter()
            .filter(|&&v| self.consumers[v].is_empty())
            .map(|&v| self.variables[v].name.as_str())
            .collect()
    }

    /// Variables of the given role, in declaration order.
    pub fn with_role(&self, role: Role) -> Vec<&Variable> {
        self.variables.iter().filter(|v| v.role == role).collect()
    }

    pub fn producer_of(&self, name: &str) -> Option<&Layer> {
        let v = *self.index.get(name)?;
        self.producer[v].map(|l| &self.layers[l])
    }

    pub fn consumers_of(&self, name: &str) -> Vec<&Layer> {
        self.index
            .get(name)
            .map(|&v| self.consumers[v].iter().map(|&l| &self.layers[l]).collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
pub(crate) mod fixtures;
