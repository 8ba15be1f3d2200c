use super::exec::Tape;
use super::{Graph, LayerKind};
use crate::error::Result;
use crate::geometry::{rf_compose, rf_overlay, RfTransform};
use crate::tensor::{Scalar, Shape};

/// Shape and receptive field of a layer's first output.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGeometry {
    pub layer: String,
    pub kind: String,
    pub output: String,
    pub shape: Shape,
    /// The layer's own transform per axis.
    pub local: Option<[RfTransform; 2]>,
    /// Transform from the chosen input to this output; `None` when the
    /// layer is not downstream of it or the composition is not a single
    /// affine map.
    pub total: Option<[RfTransform; 2]>,
}

#[derive(Clone, Copy, Debug)]
enum Rf {
    Unrelated,
    Unknown,
    Known([RfTransform; 2]),
}

impl Graph {
    /// Per-layer shapes and receptive fields relative to `input`, in
    /// evaluation order. `tape` supplies the shapes.
    pub fn geometry_table<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        input: &str,
    ) -> Result<Vec<LayerGeometry>> {
        let root = self.var_id(input)?;
        let mut rf = vec![Rf::Unrelated; self.variables.len()];
        rf[root] = Rf::Known([RfTransform::identity(); 2]);
        let mut rows = Vec::new();
        for &l in &self.schedule {
            let layer = &self.layers[l];
            let filter = self.ins[l]
                .get(1)
                .and_then(|&v| tape.value(&self.variables[v].name))
                .map(|t| t.shape());
            let local = match layer.kind {
                LayerKind::Conv(_) | LayerKind::ConvT(_) => layer.kind.rf(filter),
                _ => layer.kind.rf(None),
            };
            let mut acc = Rf::Unrelated;
            for i in layer.kind.spatial_inputs(layer.inputs.len()) {
                acc = match (acc, rf[self.ins[l][i]]) {
                    (a, Rf::Unrelated) => a,
                    (Rf::Unrelated, b) => b,
                    (Rf::Known(a), Rf::Known(b)) => {
                        match (rf_overlay(a[0], b[0]), rf_overlay(a[1], b[1])) {
                            (Ok(h), Ok(w)) => Rf::Known([h, w]),
                            _ => Rf::Unknown,
                        }
                    }
                    _ => Rf::Unknown,
                };
            }
            let reaches = self.ins[l].iter().any(|&v| !matches!(rf[v], Rf::Unrelated));
            let out = match (acc, local) {
                (Rf::Known(a), Some(f)) => {
                    Rf::Known([rf_compose(a[0], f[0]), rf_compose(a[1], f[1])])
                }
                (Rf::Unrelated, _) if !reaches => Rf::Unrelated,
                _ => Rf::Unknown,
            };
            for &v in &self.outs[l] {
                rf[v] = out;
            }
            let v0 = self.outs[l][0];
            rows.push(LayerGeometry {
                layer: layer.name.clone(),
                kind: layer.kind.type_name().to_string(),
                output: self.variables[v0].name.clone(),
                shape: tape
                    .value(&self.variables[v0].name)
                    .map(|t| t.shape())
                    .unwrap_or(Shape::new(0, 0, 0, 0)),
                local,
                total: match out {
                    Rf::Known(t) => Some(t),
                    _ => None,
                },
            });
        }
        Ok(rows)
    }
}
