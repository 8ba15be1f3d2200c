use std::collections::HashMap;

use super::exec::{Bindings, ForwardOptions, Tape};
use super::{Graph, Layer, LayerKind, Role, Variable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A graph computing the derivatives of another by forward evaluation.
///
/// Every variable of the original graph is an input, as is a seed
/// `d{sink}` per sink. Each original layer `f` becomes a derivative layer
/// `d{f}`; a variable read in several places gets one partial
/// `d{x}#{f}` per reading slot and a summation layer `sum_d{x}` producing
/// `d{x}`.
#[derive(Clone, Debug)]
pub struct ReversedGraph {
    pub graph: Graph,
    /// Original sink name to seed variable name.
    pub seeds: Vec<(String, String)>,
    /// Original variable name to derivative variable name.
    pub derivatives: HashMap<String, String>,
}

fn dname(v: &str) -> String {
    format!("d{v}")
}

impl Graph {
    pub fn reverse_graph(&self) -> Result<ReversedGraph> {
        let mut variables: Vec<Variable> = self
            .variables
            .iter()
            .map(|v| Variable {
                name: v.name.clone(),
                role: Role::Input,
                shape: None,
            })
            .collect();
        let mut seeds = Vec::new();
        for &v in &self.var_order {
            if self.consumers[v].is_empty() {
                let name = &self.variables[v].name;
                seeds.push((name.clone(), dname(name)));
                variables.push(Variable {
                    name: dname(name),
                    role: Role::Input,
                    shape: None,
                });
            }
        }

        // reading slots per variable, in the order backward visits them
        let mut slots: Vec<Vec<String>> = vec![Vec::new(); self.variables.len()];
        let mut layers = Vec::new();
        for &l in self.schedule.iter().rev() {
            let layer = &self.layers[l];
            if matches!(layer.kind, LayerKind::Derivative { .. }) {
                return Err(Error::Graph(
                    "cannot reverse a graph of derivative layers".into(),
                ));
            }
            let mut outputs = Vec::with_capacity(layer.inputs.len());
            for (i, &v) in self.ins[l].iter().enumerate() {
                let name = &self.variables[v].name;
                let fan_out: usize = self
                    .ins
                    .iter()
                    .map(|ins| ins.iter().filter(|&&u| u == v).count())
                    .sum();
                let out = if fan_out == 1 {
                    dname(name)
                } else if self.ins[l].iter().filter(|&&u| u == v).count() == 1 {
                    format!("d{name}#{}", layer.name)
                } else {
                    format!("d{name}#{}#{i}", layer.name)
                };
                if fan_out > 1 {
                    slots[v].push(out.clone());
                }
                outputs.push(out);
            }
            let mut inputs = layer.inputs.clone();
            inputs.extend(layer.outputs.iter().map(|o| dname(o)));
            layers.push(Layer {
                name: format!("d{}", layer.name),
                kind: LayerKind::Derivative {
                    of: Box::new(layer.kind.clone()),
                    inputs: layer.inputs.len(),
                    outputs: layer.outputs.len(),
                },
                inputs,
                outputs,
            });
        }
        for &v in &self.var_order {
            if slots[v].len() > 1 {
                let name = &self.variables[v].name;
                layers.push(Layer {
                    name: format!("sum_d{name}"),
                    kind: LayerKind::Sum,
                    inputs: slots[v].clone(),
                    outputs: vec![dname(name)],
                });
            }
        }

        let derivatives = self
            .variables
            .iter()
            .enumerate()
            .filter(|&(v, _)| !self.consumers[v].is_empty() || self.producer[v].is_some())
            .map(|(_, var)| (var.name.clone(), dname(&var.name)))
            .collect();
        Ok(ReversedGraph {
            graph: Graph::new(variables, layers)?,
            seeds,
            derivatives,
        })
    }
}

impl ReversedGraph {
    /// Evaluates the derivatives for the values on `tape`; sinks without an
    /// entry in `seeds` get a zero seed.
    pub fn evaluate<'t, T: Scalar>(
        &self,
        original: &Graph,
        tape: &'t Tape<'_, T>,
        seeds: &[(&str, Tensor<T>)],
    ) -> Result<Tape<'t, T>> {
        let mut b = Bindings::new();
        for var in original.variables() {
            if let Some(t) = tape.value(&var.name) {
                b.bind(&var.name, t);
            }
        }
        for (sink, seed_var) in &self.seeds {
            let value = tape
                .value(sink)
                .ok_or_else(|| Error::Graph(format!("`{sink}` has no value on the tape")))?;
            match seeds.iter().find(|(n, _)| n == sink) {
                Some((_, s)) => {
                    s.expect_shape(value.shape(), &format!("seed for `{sink}`"))?;
                    b.bind_owned(seed_var, s.clone());
                }
                None => {
                    b.bind_owned(seed_var, Tensor::zeros(value.shape()));
                }
            }
        }
        self.graph.forward(
            &b,
            ForwardOptions {
                mode: tape.mode(),
                inference: false,
            },
        )
    }
}
