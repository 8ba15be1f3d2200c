use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::exec::{Bindings, ForwardOptions};
use super::{Graph, Mode, Role};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central differences use `h = step · max(1, |x|)`.
    pub step: f64,
    /// Checks a random subset of at most this many elements per variable.
    pub max_per_variable: Option<usize>,
    pub seed: u64,
    /// The scalar sink to differentiate; defaults to the only scalar sink.
    pub objective: Option<String>,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_per_variable: None,
            seed: 0,
            objective: None,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariableCheck {
    pub name: String,
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|, 1e-3 · s)` over the checked
    /// elements, with `a` analytic, `n` numeric and `s` the largest
    /// magnitude of either seen across all checked variables.
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub objective: String,
    pub variables: Vec<VariableCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.variables
            .iter()
            .map(|v| v.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compares backpropagated derivatives of a scalar output with central
/// finite differences for every input, label and parameter.
pub fn grad_check<T: Scalar>(
    graph: &Graph,
    bindings: &Bindings<'_, T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let train = ForwardOptions {
        mode: opts.mode,
        inference: false,
    };
    let mut tape = graph.forward(bindings, train)?;
    let objective = match &opts.objective {
        Some(o) => o.clone(),
        None => {
            let scalars: Vec<&str> = graph
                .sinks()
                .into_iter()
                .filter(|s| tape.value(s).is_some_and(|t| t.numel() == 1))
                .collect();
            match scalars.as_slice() {
                [one] => one.to_string(),
                _ => {
                    return Err(Error::Graph(format!(
                        "gradient checking needs exactly one scalar output, found {scalars:?}"
                    )))
                }
            }
        }
    };
    let out = tape
        .value(&objective)
        .ok_or_else(|| Error::Graph(format!("unknown objective `{objective}`")))?;
    if out.numel() != 1 || !graph.sinks().contains(&objective.as_str()) {
        return Err(Error::Graph(format!(
            "`{objective}` is not a scalar output of the graph"
        )));
    }
    let seed_shape = out.shape();
    graph.backward(&mut tape, &[(objective.as_str(), Tensor::ones(seed_shape))])?;

    let probe = ForwardOptions {
        mode: opts.mode,
        inference: true,
    };
    let mut work = bindings.to_owned();
    let eval = |work: &Bindings<'_, T>| -> Result<f64> {
        let t = graph.forward(work, probe)?;
        Ok(t.value(&objective).expect("sinks are kept").vec()[0]
            .to_f64()
            .unwrap_or(f64::NAN))
    };
    let mut rng = Xoshiro256StarStar::seed_from_u64(opts.seed);
    let mut checked = Vec::new();
    for var in graph.variables() {
        if !matches!(var.role, Role::Input | Role::Param | Role::Label)
            || bindings.get(&var.name).is_none()
        {
            continue;
        }
        let analytic = tape
            .deriv(&var.name)
            .expect("bound variables get derivatives")
            .clone();
        let n = analytic.numel();
        let elements: Vec<usize> = match opts.max_per_variable {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut pairs = Vec::with_capacity(elements.len());
        for &i in &elements {
            let x0 = work.get(&var.name).expect("bound").vec()[i];
            let h = opts.step * x0.to_f64().unwrap_or(0.0).abs().max(1.0);
            let set = |work: &mut Bindings<'_, T>, v: T| {
                work.get_mut(&var.name).expect("bound").vec_mut()[i] = v
            };
            set(&mut work, x0 + T::of(h));
            let up = eval(&work)?;
            set(&mut work, x0 - T::of(h));
            let down = eval(&work)?;
            set(&mut work, x0);
            let numeric = (up - down) / (2.0 * h);
            pairs.push((analytic.vec()[i].to_f64().unwrap_or(f64::NAN), numeric));
        }
        checked.push((var.name.clone(), elements, pairs));
    }
    let scale = checked
        .iter()
        .flat_map(|(_, _, p)| p)
        .map(|&(a, n)| a.abs().max(n.abs()))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut variables = Vec::new();
    for (name, elements, pairs) in checked {
        let mut worst = (0.0f64, elements.first().copied().unwrap_or(0));
        for (&i, &(a, num)) in elements.iter().zip(&pairs) {
            let denom = a.abs().max(num.abs()).max(1e-3 * scale);
            let err = if denom == 0.0 {
                0.0
            } else {
                (a - num).abs() / denom
            };
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst.0 {
                worst = (err, i);
            }
        }
        variables.push(VariableCheck {
            name,
            checked: elements.len(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        objective,
        variables,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::fig_dag;
    use super::super::{CustomBlock, LayerKind};
    use super::*;
    use crate::loss::LossKind;
    use crate::tensor::Shape;
    use std::sync::Arc;

    /// `y = x²` with a backward that is off by `factor`.
    #[derive(Debug)]
    struct Square {
        factor: f64,
    }

    impl CustomBlock for Square {
        fn name(&self) -> &str {
            "square"
        }

        fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![inputs[0].map(|v| v * v)])
        }

        fn backward(
            &self,
            inputs: &[&Tensor<f64>],
            _outputs: &[&Tensor<f64>],
            proj: &[Option<&Tensor<f64>>],
        ) -> Result<Vec<Tensor<f64>>> {
            let p = proj[0].expect("seeded");
            Ok(vec![inputs[0].zip_map(p, |x, p| self.factor * 2.0 * x * p)?])
        }
    }

    fn square_graph(factor: f64) -> Graph {
        Graph::builder()
            .input("x")
            .label("c")
            .layer(
                "sq",
                LayerKind::Custom(Arc::new(Square { factor })),
                &["x"],
                &["y"],
            )
            .layer(
                "loss",
                LayerKind::Loss {
                    loss: LossKind::SoftmaxLog,
                },
                &["y", "c"],
                &["z"],
            )
            .build()
            .unwrap()
    }

    fn square_bindings() -> Bindings<'static, f64> {
        let mut b = Bindings::new();
        b.bind_owned(
            "x",
            Tensor::from_f64(Shape::new(1, 1, 3, 2), &[0.3, -0.2, 0.9, 1.1, 0.4, -0.5]).unwrap(),
        );
        b.bind_owned(
            "c",
            Tensor::from_f64(Shape::new(1, 1, 1, 2), &[2.0, 3.0]).unwrap(),
        );
        b
    }

    #[test]
    fn correct_blocks_pass() {
        let r = grad_check(
            &square_graph(1.0),
            &square_bindings(),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.objective, "z");
        assert!(r.worst() < 1e-6, "{r:?}");
        assert_eq!(
            r.variables
                .iter()
                .find(|v| v.name == "c")
                .unwrap()
                .max_rel_err,
            0.0
        );
    }

    #[test]
    fn corrupted_block_is_flagged() {
        let r = grad_check(
            &square_graph(1.05),
            &square_bindings(),
            &GradCheckOptions::default(),
        )
        .unwrap();
        let x = r.variables.iter().find(|v| v.name == "x").unwrap();
        assert!(x.max_rel_err > 1e-2, "{r:?}");
    }

    #[test]
    fn needs_a_scalar_output() {
        let relu = Graph::builder()
            .input("x")
            .layer("r", LayerKind::Relu, &["x"], &["y"])
            .build()
            .unwrap();
        let mut b = Bindings::new();
        b.bind_owned("x", Tensor::<f64>::ones(Shape::new(2, 1, 1, 1)));
        let e = grad_check(&relu, &b, &GradCheckOptions::default()).unwrap_err();
        assert!(e.to_string().contains("scalar"), "{e}");
        let (g, b) = fig_dag(0);
        let opts = GradCheckOptions {
            objective: Some("x7".into()),
            ..Default::default()
        };
        assert!(grad_check(&g, &b, &opts).is_err());
    }

    #[test]
    fn fig_dag_mean_output_checks() {
        let (g, b) = fig_dag(3);
        let opts = GradCheckOptions {
            objective: Some("x6".into()),
            ..Default::default()
        };
        let r = grad_check(&g, &b, &opts).unwrap();
        assert!(r.worst() < 1e-6, "{r:?}");
    }

    #[test]
    fn subsampling_checks_the_requested_count() {
        let opts = GradCheckOptions {
            max_per_variable: Some(2),
            ..Default::default()
        };
        let r = grad_check(&square_graph(1.0), &square_bindings(), &opts).unwrap();
        assert_eq!(
            r.variables.iter().find(|v| v.name == "x").unwrap().checked,
            2
        );
    }
}
