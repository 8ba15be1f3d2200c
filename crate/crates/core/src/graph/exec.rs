use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::block::{self, Mode};
use super::{Graph, Role};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Values for the inputs, labels, parameters and states of a graph, either
/// borrowed or owned.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a, T: Scalar> {
    map: HashMap<String, Cow<'a, Tensor<T>>>,
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Bindings {
            map: HashMap::new(),
        }
    }

    pub fn bind(&mut self, name: &str, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name.to_string(), Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, name: &str, value: Tensor<T>) -> &mut Self {
        self.map.insert(name.to_string(), Cow::Owned(value));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name).map(|c| c.as_ref())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name).map(|c| c.to_mut())
    }

    /// A copy owning all of its values.
    pub fn to_owned(&self) -> Bindings<'static, T> {
        Bindings {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Cow::Owned(v.as_ref().clone())))
                .collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Release intermediate values as soon as they are consumed; the tape
    /// then supports no backward pass.
    pub inference: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions::default()
    }

    /// Test mode with bound moments, keeping every value.
    pub fn test() -> Self {
        ForwardOptions {
            mode: Mode::Test,
            inference: false,
        }
    }

    pub fn inference() -> Self {
        ForwardOptions {
            mode: Mode::Test,
            inference: true,
        }
    }
}

/// Values recorded by a forward pass and, after [`Graph::backward`], the
/// derivative of every variable.
#[derive(Clone, Debug)]
pub struct Tape<'a, T: Scalar> {
    index: Arc<HashMap<String, usize>>,
    values: Vec<Option<Cow<'a, Tensor<T>>>>,
    derivs: Vec<Option<Tensor<T>>>,
    mode: Mode,
    inference: bool,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        let &v = self.index.get(name)?;
        self.values[v].as_deref()
    }

    /// Derivative of the projected objective with respect to `name`; `None`
    /// before [`Graph::backward`] has run.
    pub fn deriv(&self, name: &str) -> Option<&Tensor<T>> {
        let &v = self.index.get(name)?;
        self.derivs[v].as_ref()
    }

    /// Moves a value out of the tape.
    pub fn take_value(&mut self, name: &str) -> Option<Tensor<T>> {
        let &v = self.index.get(name)?;
        self.values[v].take().map(Cow::into_owned)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivs.iter().any(Option::is_some)
    }
}

impl Graph {
    fn check_binding<T: Scalar>(&self, v: usize, t: &Tensor<T>) -> Result<()> {
        let var = &self.variables[v];
        let Some(want) = var.shape else { return Ok(()) };
        let got = t.shape();
        let ok = match var.role {
            Role::Input | Role::Label => {
                (got.h(), got.w(), got.c()) == (want.h(), want.w(), want.c())
            }
            _ => got == want,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "`{}` is bound to a {got} tensor, declared {want}",
                var.name
            )))
        }
    }

    /// Evaluates all layers in topological order.
    pub fn forward<'a, T: Scalar>(
        &self,
        bindings: &Bindings<'a, T>,
        opts: ForwardOptions,
    ) -> Result<Tape<'a, T>> {
        let nv = self.variables.len();
        let mut values: Vec<Option<Cow<'a, Tensor<T>>>> = vec![None; nv];
        for (name, t) in &bindings.map {
            let v = self.var_id(name)?;
            if !self.variables[v].role.is_bound() {
                return Err(Error::Graph(format!(
                    "`{name}` is computed by a layer and cannot be bound"
                )));
            }
            self.check_binding(v, t)?;
            values[v] = Some(t.clone());
        }
        for (v, var) in self.variables.iter().enumerate() {
            if var.role.is_bound() && values[v].is_none() && !self.consumers[v].is_empty() {
                return Err(Error::Graph(format!(
                    "no value bound for {:?} `{}`",
                    var.role, var.name
                )));
            }
        }

        // position in the schedule of each variable's last reader
        let mut last_use = vec![None; nv];
        if opts.inference {
            for (k, &l) in self.schedule.iter().enumerate() {
                for &v in &self.ins[l] {
                    last_use[v] = Some(k);
                }
            }
        }

        for (k, &l) in self.schedule.iter().enumerate() {
            let layer = &self.layers[l];
            let ins: Vec<&Tensor<T>> = self.ins[l]
                .iter()
                .map(|&v| {
                    values[v]
                        .as_deref()
                        .expect("inputs are evaluated before their readers")
                })
                .collect();
            let outs = block::forward(&layer.kind, &ins, self.outs[l].len(), opts.mode)
                .map_err(|e| e.in_layer(&layer.name))?;
            for (&v, t) in self.outs[l].iter().zip(outs) {
                self.check_binding(v, &t)
                    .map_err(|e| e.in_layer(&layer.name))?;
                values[v] = Some(Cow::Owned(t));
            }
            if opts.inference {
                for &v in &self.ins[l] {
                    if self.variables[v].role == Role::Derived && last_use[v] == Some(k) {
                        values[v] = None;
                    }
                }
            }
        }

        Ok(Tape {
            index: Arc::new(self.index.clone()),
            values,
            derivs: vec![None; nv],
            mode: opts.mode,
            inference: opts.inference,
        })
    }

    /// Backpropagates the projections `seeds` (one per chosen sink; the
    /// other sinks get zero) through the tape. Earlier derivatives on the
    /// tape are replaced.
    pub fn backward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        seeds: &[(&str, Tensor<T>)],
    ) -> Result<()> {
        if tape.inference {
            return Err(Error::Graph(
                "the tape was recorded in inference mode and has no backward pass".into(),
            ));
        }
        if tape.values.len() != self.variables.len() {
            return Err(Error::Graph(
                "the tape was recorded by a different graph".into(),
            ));
        }
        let nv = self.variables.len();
        let mut derivs: Vec<Option<Tensor<T>>> = vec![None; nv];
        for (name, seed) in seeds {
            let v = self.var_id(name)?;
            if !self.consumers[v].is_empty() {
                return Err(Error::Graph(format!(
                    "`{name}` is read by a layer, so it cannot be seeded"
                )));
            }
            if derivs[v].is_some() {
                return Err(Error::Graph(format!("`{name}` is seeded twice")));
            }
            let value = tape.values[v]
                .as_deref()
                .ok_or_else(|| Error::Graph(format!("`{name}` has no value on the tape")))?;
            seed.expect_shape(value.shape(), &format!("seed for `{name}`"))?;
            derivs[v] = Some(seed.clone());
        }

        for &l in self.schedule.iter().rev() {
            if self.outs[l].iter().all(|&v| derivs[v].is_none()) {
                continue;
            }
            let layer = &self.layers[l];
            let value = |v: usize| {
                tape.values[v]
                    .as_deref()
                    .expect("training tapes keep every value")
            };
            let ins: Vec<&Tensor<T>> = self.ins[l].iter().map(|&v| value(v)).collect();
            let outs: Vec<&Tensor<T>> = self.outs[l].iter().map(|&v| value(v)).collect();
            let proj: Vec<Option<&Tensor<T>>> =
                self.outs[l].iter().map(|&v| derivs[v].as_ref()).collect();
            let grads = block::backward(&layer.kind, &ins, &outs, &proj, tape.mode)
                .map_err(|e| e.in_layer(&layer.name))?;
            for (&v, d) in self.ins[l].iter().zip(grads) {
                let Some(d) = d else { continue };
                if self.variables[v].role == Role::State {
                    continue;
                }
                match &mut derivs[v] {
                    Some(acc) => acc.add_assign(&d).map_err(|e| e.in_layer(&layer.name))?,
                    slot @ None => *slot = Some(d),
                }
            }
        }

        for (v, d) in derivs.iter_mut().enumerate() {
            if d.is_none() {
                if let Some(x) = &tape.values[v] {
                    *d = Some(Tensor::zeros(x.shape()));
                }
            }
        }
        tape.derivs = derivs;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::*;
    use crate::conv::ConvGeom;
    use crate::loss::LossKind;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;

    #[test]
    fn backward_matches_hand_chain_rule() {
        // y = relu(f * x), z = sum of y with a seed of 1
        let g = Graph::builder()
            .input("x")
            .param("f", Shape::new(1, 1, 1, 1))
            .layer(
                "conv",
                LayerKind::Conv(ConvGeom::default()),
                &["x", "f"],
                &["u"],
            )
            .layer("relu", LayerKind::Relu, &["u"], &["y"])
            .build()
            .unwrap();
        let x = Tensor::<f64>::from_f64(Shape::new(3, 1, 1, 1), &[1.0, -2.0, 3.0]).unwrap();
        let f = Tensor::from_f64(Shape::new(1, 1, 1, 1), &[2.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &x).bind("f", &f);
        let mut tape = g.forward(&b, ForwardOptions::train()).unwrap();
        assert_eq!(tape.value("y").unwrap().vec(), &[2.0, 0.0, 6.0]);
        g.backward(&mut tape, &[("y", Tensor::ones(Shape::new(3, 1, 1, 1)))])
            .unwrap();
        assert_eq!(tape.deriv("x").unwrap().vec(), &[2.0, 0.0, 2.0]);
        assert_eq!(tape.deriv("f").unwrap().vec(), &[4.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        // y = (w x) + (w x) through two separate convolutions
        let g = Graph::builder()
            .input("x")
            .param("w", Shape::new(1, 1, 1, 1))
            .layer(
                "a",
                LayerKind::Conv(ConvGeom::default()),
                &["x", "w"],
                &["u"],
            )
            .layer(
                "b",
                LayerKind::Conv(ConvGeom::default()),
                &["x", "w"],
                &["v"],
            )
            .layer("s", LayerKind::Sum, &["u", "v"], &["y"])
            .build()
            .unwrap();
        let x = Tensor::<f64>::from_f64(Shape::new(2, 1, 1, 1), &[1.0, 2.0]).unwrap();
        let w = Tensor::scalar(3.0);
        let mut b = Bindings::new();
        b.bind("x", &x).bind("w", &w);
        let mut tape = g.forward(&b, ForwardOptions::train()).unwrap();
        g.backward(&mut tape, &[("y", Tensor::ones(x.shape()))])
            .unwrap();
        assert_eq!(tape.deriv("w").unwrap().vec(), &[6.0]);
        assert_eq!(tape.deriv("x").unwrap().vec(), &[6.0, 6.0]);
    }

    #[test]
    fn untouched_branches_stay_zero() {
        let (g, b) = fig_dag(1);
        let mut tape = g.forward(&b, ForwardOptions::train()).unwrap();
        // seed only the mean output: the convolutions feeding x3 get nothing
        g.backward(&mut tape, &[("x6", Tensor::scalar(1.0))])
            .unwrap();
        for name in ["x0", "w1", "w2", "x1", "x2", "w5"] {
            let d = tape.deriv(name).unwrap();
            assert!(d.vec().iter().all(|&v| v == 0.0), "{name}");
        }
        // dμ/dx = 1/M for every element
        let m = tape.value("x4").unwrap().numel() as f64;
        assert!(tape
            .deriv("x4")
            .unwrap()
            .vec()
            .iter()
            .all(|&v| (v - 1.0 / m).abs() < 1e-15));
    }

    #[test]
    fn seed_errors() {
        let (g, b) = fig_dag(2);
        let mut tape = g.forward(&b, ForwardOptions::train()).unwrap();
        let e = g
            .backward(&mut tape, &[("x7", Tensor::zeros(Shape::new(2, 2, 1, 1)))])
            .unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch(_)), "{e}");
        assert!(g
            .backward(&mut tape, &[("x1", Tensor::scalar(1.0))])
            .is_err());
        assert!(g
            .backward(&mut tape, &[("nope", Tensor::scalar(1.0))])
            .is_err());
    }

    #[test]
    fn inference_releases_intermediates_and_refuses_backward() {
        let (g, b) = fig_dag(3);
        let full = g.forward(&b, ForwardOptions::train()).unwrap();
        let mut tape = g
            .forward(
                &b,
                ForwardOptions {
                    mode: Mode::Train,
                    inference: true,
                },
            )
            .unwrap();
        assert!(tape.value("x1").is_none());
        assert!(tape.value("x5").is_none());
        assert_eq!(tape.value("x7"), full.value("x7"));
        let e = g
            .backward(&mut tape, &[("x7", Tensor::scalar(1.0))])
            .unwrap_err();
        assert!(e.to_string().contains("inference"), "{e}");
    }

    #[test]
    fn binding_errors() {
        let (g, mut b) = fig_dag(4);
        b.bind_owned("x1", Tensor::scalar(0.0));
        assert!(g.forward(&b, ForwardOptions::train()).is_err());
        let (g, mut b) = fig_dag(4);
        b.bind_owned("w1", Tensor::zeros(Shape::new(2, 2, 1, 1)));
        assert!(matches!(
            g.forward(&b, ForwardOptions::train()).unwrap_err(),
            Error::ShapeMismatch(_)
        ));
        let g2 = Graph::builder()
            .input("x")
            .label("c")
            .layer(
                "l",
                LayerKind::Loss {
                    loss: LossKind::Log,
                },
                &["x", "c"],
                &["z"],
            )
            .build()
            .unwrap();
        let mut b = Bindings::new();
        b.bind_owned("x", Tensor::filled(Shape::new(1, 1, 3, 1), 0.5));
        assert!(g2.forward(&b, ForwardOptions::train()).is_err());
    }

    #[test]
    fn block_errors_name_the_layer() {
        let (g, mut b) = fig_dag(5);
        b.bind_owned("x0", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let e = g.forward(&b, ForwardOptions::train()).unwrap_err();
        match e {
            Error::Layer { layer, .. } => assert_eq!(layer, "f1"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn test_mode_uses_stored_moments() {
        let g = Graph::builder()
            .input("x")
            .param("w", Shape::new(1, 1, 1, 1))
            .state("m", Shape::new(1, 1, 1, 2))
            .layer(
                "bn",
                LayerKind::Bnorm(BnormConfig {
                    eps: 1e-8,
                    moments: true,
                }),
                &["x", "w", "m"],
                &["y"],
            )
            .build()
            .unwrap();
        let x = Tensor::<f64>::from_f64(Shape::new(2, 1, 1, 1), &[1.0, 3.0]).unwrap();
        let w = Tensor::scalar(1.0);
        let m = Tensor::from_f64(Shape::new(1, 1, 1, 2), &[1.0, 4.0]).unwrap();
        let mut b = Bindings::new();
        b.bind("x", &x).bind("w", &w).bind("m", &m);
        let train = g.forward(&b, ForwardOptions::train()).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-7);
        assert!(close(train.value("y").unwrap().vec(), &[-1.0, 1.0]));
        let mut test = g.forward(&b, ForwardOptions::test()).unwrap();
        assert!(close(test.value("y").unwrap().vec(), &[0.0, 1.0]));
        g.backward(&mut test, &[("y", Tensor::ones(x.shape()))])
            .unwrap();
        assert!(close(test.deriv("x").unwrap().vec(), &[0.5, 0.5]));
        assert!(test.deriv("m").unwrap().vec().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn derivatives_ignore_layer_declaration_order(seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let (g, b) = fig_dag(seed);
            let shuffled = Graph::new(
                g.variables().to_vec(),
                perm.iter().map(|&i| g.layers()[i].clone()).collect(),
            ).unwrap();
            let seeds = fig_seeds(seed);
            let mut t1 = g.forward(&b, ForwardOptions::train()).unwrap();
            g.backward(&mut t1, &seeds).unwrap();
            let mut t2 = shuffled.forward(&b, ForwardOptions::train()).unwrap();
            shuffled.backward(&mut t2, &seeds).unwrap();
            for v in g.variables() {
                prop_assert_eq!(t1.deriv(&v.name), t2.deriv(&v.name));
            }
        }

        #[test]
        fn derivatives_are_linear_in_seeds(seed in 0u64..1000, a in -3.0f64..3.0, c in -3.0f64..3.0) {
            let (g, b) = fig_dag(seed);
            let s1 = fig_seeds(seed);
            let s2 = fig_seeds(seed + 7);
            let mix: Vec<(&str, Tensor<f64>)> = s1
                .iter()
                .zip(&s2)
                .map(|((n, p), (_, q))| (*n, p.zip_map(q, |p, q| a * p + c * q).unwrap()))
                .collect();
            let run = |s: &[(&str, Tensor<f64>)]| {
                let mut t = g.forward(&b, ForwardOptions::train()).unwrap();
                g.backward(&mut t, s).unwrap();
                t
            };
            let (t1, t2, tm) = (run(&s1), run(&s2), run(&mix));
            for v in g.variables() {
                let want = t1.deriv(&v.name).unwrap().zip_map(t2.deriv(&v.name).unwrap(), |p, q| a * p + c * q).unwrap();
                let got = tm.deriv(&v.name).unwrap();
                let scale = want.max_abs().max(1.0);
                let err = got.zip_map(&want, |x, y| (x - y).abs()).unwrap().max_abs();
                prop_assert!(err <= 1e-10 * scale, "{}: {}", v.name, err);
            }
        }
    }
}
