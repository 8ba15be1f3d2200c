use serde::{Deserialize, Serialize};

use super::{Graph, Layer, LayerKind, Role, Variable};
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Serializable description of a graph. Derived variables are implicit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(default)]
    pub variables: Vec<VariableSpec>,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 4]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl GraphSpec {
    pub fn from_toml(text: &str) -> Result<GraphSpec> {
        toml::from_str(text).map_err(|e| Error::Format(format!("graph manifest: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("graph manifest: {e}")))
    }

    pub fn build(&self) -> Result<Graph> {
        let variables = self
            .variables
            .iter()
            .map(|v| Variable {
                name: v.name.clone(),
                role: v.role,
                shape: v.shape.map(|[h, w, c, n]| Shape::new(h, w, c, n)),
            })
            .collect();
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: l.kind.clone(),
                inputs: l.inputs.clone(),
                outputs: l.outputs.clone(),
            })
            .collect();
        Graph::new(variables, layers)
    }
}

impl Graph {
    /// The declared variables and the layers in declaration order.
    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            variables: self
                .variables
                .iter()
                .filter(|v| v.role != Role::Derived)
                .map(|v| VariableSpec {
                    name: v.name.clone(),
                    role: v.role,
                    shape: v.shape.map(|s| [s.h(), s.w(), s.c(), s.n()]),
                })
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    name: l.name.clone(),
                    inputs: l.inputs.clone(),
                    outputs: l.outputs.clone(),
                    kind: l.kind.clone(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::fig_dag;
    use super::*;
    use crate::conv::{ConvGeom, ConvTransposeGeom};
    use crate::graph::{BnormConfig, CustomBlock};
    use crate::loss::LossKind;
    use crate::norm::{LrnParams, SpnormParams};
    use crate::pool::PoolGeom;
    use std::sync::Arc;

    fn every_kind() -> Graph {
        let p = Shape::new(1, 1, 1, 1);
        Graph::builder()
            .input("x")
            .label("c")
            .param("f", Shape::new(3, 3, 1, 1))
            .param("w", p)
            .state("m", Shape::new(1, 1, 1, 2))
            .input("grid")
            .layer(
                "conv",
                LayerKind::Conv(ConvGeom::new([2, 1], [1, 1, 0, 2]).with_groups(1)),
                &["x", "f"],
                &["a"],
            )
            .layer(
                "convt",
                LayerKind::ConvT(ConvTransposeGeom::new([2, 2], [0, 1, 1, 0])),
                &["a", "f", "w"],
                &["b"],
            )
            .layer(
                "pool",
                LayerKind::Pool(PoolGeom::avg([2, 2], [1, 1]).with_pad([1, 0, 0, 1])),
                &["b"],
                &["d"],
            )
            .layer("relu", LayerKind::Relu, &["d"], &["e"])
            .layer("sig", LayerKind::Sigmoid, &["e"], &["g"])
            .layer("lrn", LayerKind::Lrn(LrnParams::default()), &["g"], &["h"])
            .layer(
                "bn",
                LayerKind::Bnorm(BnormConfig {
                    eps: 1e-3,
                    moments: true,
                }),
                &["h", "w", "w", "m"],
                &["i", "mu", "s2"],
            )
            .layer(
                "sp",
                LayerKind::Spnorm(SpnormParams {
                    window: [3, 3],
                    alpha: 0.5,
                    beta: 0.25,
                }),
                &["i"],
                &["j"],
            )
            .layer("sm", LayerKind::Softmax, &["j"], &["k"])
            .layer("bil", LayerKind::Bilinear, &["k", "grid"], &["l"])
            .layer(
                "pd",
                LayerKind::Pdist {
                    p: 1.5,
                    no_root: true,
                },
                &["l", "l"],
                &["o"],
            )
            .layer("sum", LayerKind::Sum, &["o", "o"], &["q"])
            .layer("mul", LayerKind::Mul, &["q", "q"], &["r"])
            .layer(
                "loss",
                LayerKind::Loss {
                    loss: LossKind::TopK { k: 3 },
                },
                &["r", "c"],
                &["z"],
            )
            .build()
            .unwrap()
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        for g in [every_kind(), fig_dag(0).0] {
            let text = g.to_spec().to_toml().unwrap();
            let back = GraphSpec::from_toml(&text).unwrap().build().unwrap();
            assert_eq!(back.to_spec().to_toml().unwrap(), text);
            assert_eq!(back.variables(), g.variables());
            assert_eq!(back.toposort_variables(), g.toposort_variables());
            for (a, b) in back.layers().iter().zip(g.layers()) {
                assert_eq!(format!("{:?}", a.kind), format!("{:?}", b.kind));
            }
        }
    }

    #[test]
    fn reads_hand_written_manifest() {
        let text = r#"
            [[variables]]
            name = "x"
            role = "input"
            shape = [8, 8, 1, 1]

            [[variables]]
            name = "f"
            role = "param"
            shape = [3, 3, 1, 4]

            [[layers]]
            name = "conv1"
            type = "conv"
            inputs = ["x", "f"]
            outputs = ["y"]
            pad = [1, 1, 1, 1]

            [[layers]]
            name = "pool1"
            type = "pool"
            inputs = ["y"]
            outputs = ["p"]
            window = [2, 2]
            stride = [2, 2]
            mode = "max"

            [[layers]]
            name = "loss"
            type = "loss"
            inputs = ["p", "c"]
            outputs = ["z"]
            loss = { type = "binaryerror", threshold = 0.5 }

            [[variables]]
            name = "c"
            role = "label"
        "#;
        let g = GraphSpec::from_toml(text).unwrap().build().unwrap();
        match &g.layer("conv1").unwrap().kind {
            LayerKind::Conv(geom) => assert_eq!(*geom, ConvGeom::new([1, 1], [1, 1, 1, 1])),
            k => panic!("{k:?}"),
        }
        assert!(matches!(
            g.layer("loss").unwrap().kind,
            LayerKind::Loss { loss: LossKind::BinaryError { threshold } } if threshold == 0.5
        ));
        assert!(GraphSpec::from_toml(
            "[[layers]]\nname = \"a\"\ntype = \"warp\"\ninputs = []\noutputs = []"
        )
        .is_err());
    }

    #[derive(Debug)]
    struct Nop;

    impl CustomBlock for Nop {
        fn name(&self) -> &str {
            "nop"
        }
        fn forward(&self, inputs: &[&crate::Tensor<f64>]) -> Result<Vec<crate::Tensor<f64>>> {
            Ok(vec![inputs[0].clone()])
        }
        fn backward(
            &self,
            _: &[&crate::Tensor<f64>],
            _: &[&crate::Tensor<f64>],
            p: &[Option<&crate::Tensor<f64>>],
        ) -> Result<Vec<crate::Tensor<f64>>> {
            Ok(vec![p[0].unwrap().clone()])
        }
    }

    #[test]
    fn custom_blocks_do_not_serialize() {
        let g = Graph::builder()
            .input("x")
            .layer("n", LayerKind::Custom(Arc::new(Nop)), &["x"], &["y"])
            .build()
            .unwrap();
        assert!(g.to_spec().to_toml().is_err());
    }
}
