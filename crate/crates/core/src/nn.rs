//! Named parameter storage and the layer helpers shared by every network.

use std::cell::RefCell;
use std::collections::BTreeMap;

use gwnet_tensor::{
    activation, batch_norm_eval, conv2d, deconv2d, normalize, normalize_with_stats, Activation, ConvSpec, Gradients,
    NormKind, Shape, Tensor, Var, DEFAULT_EPS,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Running statistics are stored as non-trainable buffers.
    pub trainable: bool,
}

/// Flat, name-ordered parameter set of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!("`{name}`: shape {} vs {}", value.shape(), p.value.shape())));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    /// Replaces every value with `f(name, value)`, keeping shapes.
    pub fn map_values(&mut self, mut f: impl FnMut(&str, &Tensor) -> Tensor) {
        for (name, p) in self.params.iter_mut() {
            p.value = f(name, &p.value);
        }
    }

    /// Folds batch statistics into the running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_stat_updates(&mut self, updates: &BTreeMap<String, (Tensor, Tensor)>, momentum: f64) -> Result<()> {
        for (prefix, (mean, var)) in updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("{prefix}.{suffix}");
                let old = self.get(&name)?.clone();
                let new = old.zip_broadcast(batch, |r, b| (1.0 - momentum) * r + momentum * b).expect("stat shapes");
                self.set(&name, new)?;
            }
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics (recording them for the running
/// averages) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] to graph variables for one forward pass.
///
/// With `track` set, trainable parameters become leaves whose gradients can
/// be read back with [`Binder::grads`]; otherwise everything is constant.
pub struct Binder<'a> {
    store: &'a ParamStore,
    mode: Mode,
    track: bool,
    vars: RefCell<BTreeMap<String, Var>>,
    stats: RefCell<BTreeMap<String, (Tensor, Tensor)>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        Binder { store, mode, track, vars: RefCell::default(), stats: RefCell::default() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self.store.param(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let v = if self.track && p.trainable { Var::leaf(p.value.clone()) } else { Var::constant(p.value.clone()) };
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Substitutes `value` for the parameter `name` in this pass, e.g. a
    /// graph input of a gradient check.
    pub fn bind(&self, name: &str, value: Var) -> Result<()> {
        let p = self.store.param(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!("`{name}` is {}, bound value is {}", p.value.shape(), value.shape())));
        }
        self.vars.borrow_mut().insert(name.to_string(), value);
        Ok(())
    }

    /// Gradients of every bound trainable parameter (zeros when unused).
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(name, v)| (name.clone(), g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }

    /// Leaves bound so far, by name.
    pub fn leaves(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().filter(|(_, v)| v.requires_grad()).map(|(n, v)| (n.clone(), v.clone())).collect()
    }

    /// Batch statistics recorded in train mode; the first forward through a
    /// layer wins, so later probe passes do not overwrite them.
    pub fn take_stat_updates(&self) -> BTreeMap<String, (Tensor, Tensor)> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    pub fn conv(&self, prefix: &str, x: &Var, stride: usize, pad: usize) -> Result<Var> {
        let spec = ConvSpec::new(self.var(&format!("{prefix}.w"))?, Some(self.var(&format!("{prefix}.b"))?), stride, pad);
        Ok(conv2d(x, &spec)?)
    }

    pub fn deconv(&self, prefix: &str, x: &Var, stride: usize, pad: usize) -> Result<Var> {
        let spec = ConvSpec::new(self.var(&format!("{prefix}.w"))?, Some(self.var(&format!("{prefix}.b"))?), stride, pad);
        Ok(deconv2d(x, &spec)?)
    }

    pub fn norm(&self, prefix: &str, x: &Var, kind: Norm) -> Result<Var> {
        let affine = || -> Result<(Var, Var)> {
            Ok((self.var(&format!("{prefix}.gamma"))?, self.var(&format!("{prefix}.beta"))?))
        };
        match kind {
            Norm::None => Ok(x.clone()),
            Norm::Instance => {
                let (g, b) = affine()?;
                Ok(normalize(x, NormKind::Instance, &g, &b, DEFAULT_EPS)?)
            }
            Norm::Layer => {
                let (g, b) = affine()?;
                Ok(normalize(x, NormKind::Layer, &g, &b, DEFAULT_EPS)?)
            }
            Norm::Batch => {
                let (g, b) = affine()?;
                match self.mode {
                    Mode::Train => {
                        let (y, stats) = normalize_with_stats(x, NormKind::Batch, &g, &b, DEFAULT_EPS)?;
                        self.stats.borrow_mut().entry(prefix.to_string()).or_insert((stats.mean, stats.var));
                        Ok(y)
                    }
                    Mode::Eval => {
                        let mean = self.store.get(&format!("{prefix}.running_mean"))?;
                        let var = self.store.get(&format!("{prefix}.running_var"))?;
                        Ok(batch_norm_eval(x, &g, &b, mean, var, DEFAULT_EPS)?)
                    }
                }
            }
        }
    }
}

/// Normalization placed after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Batch,
    Instance,
    Layer,
}

pub fn act(x: &Var, a: Activation) -> Var {
    activation(x, a)
}

/// Normal samples truncated to two standard deviations.
pub fn truncated_normal(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Weight-init rule for convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fixed standard deviation.
    Std(f64),
    /// `sqrt(2 / fan_in)`.
    He,
}

impl Init {
    fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::Std(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

/// Adds `prefix.w` of shape `(out, inp, k, k)` and a zero `prefix.b` of
/// `bias` channels.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    (out, inp, k): (usize, usize, usize),
    bias: usize,
    init: Init,
) {
    let w = truncated_normal(Shape::new(out, inp, k, k), init.std(inp * k * k), rng);
    store.insert(format!("{prefix}.w"), w, true);
    store.insert(format!("{prefix}.b"), Tensor::zeros(Shape::new(1, bias, 1, 1)), true);
}

pub fn init_norm(store: &mut ParamStore, prefix: &str, channels: usize, kind: Norm) {
    if kind == Norm::None {
        return;
    }
    let s = Shape::new(1, channels, 1, 1);
    store.insert(format!("{prefix}.gamma"), Tensor::full(s, 1.0), true);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(s), true);
    if kind == Norm::Batch {
        store.insert(format!("{prefix}.running_mean"), Tensor::zeros(s), false);
        store.insert(format!("{prefix}.running_var"), Tensor::full(s, 1.0), false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncated_normal(Shape::new(1, 1, 100, 100), 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / t.numel() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn batch_norm_records_first_stats_and_updates_buffers() {
        let mut store = ParamStore::new();
        init_norm(&mut store, "bn", 2, Norm::Batch);
        let x = Var::constant(Tensor::from_fn(Shape::new(2, 2, 1, 1), |[n, c, _, _]| (n * 2 + c) as f64));
        let b = Binder::new(&store, Mode::Train, true);
        b.norm("bn", &x, Norm::Batch).unwrap();
        b.norm("bn", &Var::constant(Tensor::zeros(x.shape())), Norm::Batch).unwrap();
        let ups = b.take_stat_updates();
        assert_eq!(ups["bn"].0.data(), &[1.0, 2.0]);
        store.apply_stat_updates(&ups, 0.1).unwrap();
        assert!((store.get("bn.running_mean").unwrap().data()[1] - 0.2).abs() < 1e-15);
        assert!((store.get("bn.running_var").unwrap().data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn untracked_binder_yields_constants() {
        let mut store = ParamStore::new();
        init_norm(&mut store, "ln", 3, Norm::Layer);
        assert!(!Binder::new(&store, Mode::Eval, false).var("ln.gamma").unwrap().requires_grad());
        assert!(Binder::new(&store, Mode::Eval, true).var("ln.gamma").unwrap().requires_grad());
        assert!(Binder::new(&store, Mode::Eval, true).var("nope").is_err());
    }
}
